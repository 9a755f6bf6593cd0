//! Dual-masked transformer encoder.
//!
//! One shared parameter set is run twice per sequence: once under a standard
//! causal mask (domain-invariant states) and once under a causal mask
//! restricted to same-domain predecessors (domain-specific states). The
//! domain-aligned prior combines the most recent in-domain specific state
//! with the target-domain embedding, falling back to the embedding alone
//! when the user has never touched the target domain.

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::model::Forward;
use crate::tensor::Tensor;

/// Standard causal mask: `mask[m][n] = n <= m`.
pub fn build_di_mask(m: usize) -> Tensor {
    let mut data = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..=r {
            data[r * m + c] = 1.0;
        }
    }
    Tensor::new(vec![m, m], data).unwrap()
}

/// Domain-restricted causal mask:
/// `mask[m][n] = (domains[m] == domains[n]) && n <= m`.
pub fn build_ds_mask(domains: &[u16]) -> Tensor {
    let m = domains.len();
    let mut data = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..=r {
            if domains[r] == domains[c] {
                data[r * m + c] = 1.0;
            }
        }
    }
    Tensor::new(vec![m, m], data).unwrap()
}

impl Forward<'_, '_> {
    /// `x_m = Emb(i_m) + D(d_m) + Pos(m)`, one row per position.
    pub fn embed_sequence(&mut self, items: &[u32], domains: &[u16]) -> Result<NodeId> {
        let m = items.len();
        if m == 0 {
            return Err(Error::Shape("embed_sequence: empty sequence".into()));
        }
        if m > self.model.dims.max_len {
            return Err(Error::Index(format!(
                "sequence length {} exceeds max_len {}",
                m, self.model.dims.max_len
            )));
        }
        let item_idx: Vec<usize> = items.iter().map(|&i| i as usize).collect();
        let dom_idx: Vec<usize> = domains.iter().map(|&d| d as usize).collect();
        let pos_idx: Vec<usize> = (0..m).collect();
        let e_item = {
            let t = self.p("emb.item")?;
            self.graph.gather(t, &item_idx)?
        };
        let e_dom = {
            let t = self.p("emb.domain")?;
            self.graph.gather(t, &dom_idx)?
        };
        let e_pos = {
            let t = self.p("emb.pos")?;
            self.graph.gather(t, &pos_idx)?
        };
        let s = self.graph.add(e_item, e_dom)?;
        let x = self.graph.add(s, e_pos)?;
        self.maybe_dropout(x)
    }

    /// Pre-norm transformer stack under the given attention mask. The same
    /// parameters serve both mask passes.
    pub fn encode(&mut self, x: NodeId, mask: &Tensor) -> Result<NodeId> {
        let m = self.graph.value(x).shape()[0];
        if mask.shape() != [m, m] {
            return Err(Error::Shape(format!(
                "encode: mask {:?} for {m} positions",
                mask.shape()
            )));
        }
        for r in 0..m {
            if mask.data()[r * m + r] == 0.0 {
                return Err(Error::Shape(format!(
                    "encode: mask diagonal must be true (row {r})"
                )));
            }
        }
        let heads = self.model.encoder.heads;
        let dh = self.model.encoder.dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut cur = x;
        for l in 0..self.model.encoder.layers {
            let ln1 = {
                let g = self.p(&format!("enc.l{l}.ln1.g"))?;
                let b = self.p(&format!("enc.l{l}.ln1.b"))?;
                self.graph.layer_norm(cur, g, b)?
            };
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let wq = self.p(&format!("enc.l{l}.attn.h{h}.wq"))?;
                let wk = self.p(&format!("enc.l{l}.attn.h{h}.wk"))?;
                let wv = self.p(&format!("enc.l{l}.attn.h{h}.wv"))?;
                let q = self.graph.matmul(ln1, wq)?;
                let k = self.graph.matmul(ln1, wk)?;
                let v = self.graph.matmul(ln1, wv)?;
                let scores = self.graph.matmul_nt(q, k)?;
                let scaled = self.graph.scalar_affine(scores, scale, 0.0)?;
                let attn = self.graph.masked_softmax(scaled, mask)?;
                head_outs.push(self.graph.matmul(attn, v)?);
            }
            let cat = self.graph.concat(&head_outs)?;
            let wo = self.p(&format!("enc.l{l}.attn.wo"))?;
            let bo = self.p(&format!("enc.l{l}.attn.bo"))?;
            let proj = self.graph.matmul(cat, wo)?;
            let proj = self.graph.add(proj, bo)?;
            let proj = self.maybe_dropout(proj)?;
            cur = self.graph.add(cur, proj)?;

            let ln2 = {
                let g = self.p(&format!("enc.l{l}.ln2.g"))?;
                let b = self.p(&format!("enc.l{l}.ln2.b"))?;
                self.graph.layer_norm(cur, g, b)?
            };
            let w1 = self.p(&format!("enc.l{l}.ffn.w1"))?;
            let b1 = self.p(&format!("enc.l{l}.ffn.b1"))?;
            let w2 = self.p(&format!("enc.l{l}.ffn.w2"))?;
            let b2 = self.p(&format!("enc.l{l}.ffn.b2"))?;
            let f = self.graph.matmul(ln2, w1)?;
            let f = self.graph.add(f, b1)?;
            let f = self.graph.gelu(f)?;
            let f = self.graph.matmul(f, w2)?;
            let f = self.graph.add(f, b2)?;
            let f = self.maybe_dropout(f)?;
            cur = self.graph.add(cur, f)?;
        }
        let g = self.p("enc.final.g")?;
        let b = self.p("enc.final.b")?;
        self.graph.layer_norm(cur, g, b)
    }

    /// Most recent in-domain specific state plus the target-domain
    /// embedding; the embedding alone on cold start.
    pub fn domain_aligned_prior(
        &mut self,
        h_ds: NodeId,
        domains: &[u16],
        target_domain: u16,
    ) -> Result<NodeId> {
        if (target_domain as usize) >= self.model.dims.num_domains {
            return Err(Error::Index(format!(
                "target domain {} out of range",
                target_domain
            )));
        }
        let demb = {
            let t = self.p("emb.domain")?;
            self.graph.gather(t, &[target_domain as usize])?
        };
        match domains.iter().rposition(|&d| d == target_domain) {
            Some(m_star) => {
                let state = self.graph.gather(h_ds, &[m_star])?;
                self.graph.add(state, demb)
            }
            None => Ok(demb),
        }
    }

    /// Final domain-invariant user state `x1 = H^DI` row M.
    pub fn last_state(&mut self, h_di: NodeId) -> Result<NodeId> {
        let m = self.graph.value(h_di).shape()[0];
        self.graph.gather(h_di, &[m - 1])
    }
}
