//! Multi-gate mixture-of-experts head.
//!
//! Shared relu expert FFNs over the backbone's hidden vector; per task, a
//! softmax gate mixes the experts and a linear head emits one logit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmoeConfig {
    pub n_experts: usize,
    pub expert_dim: usize,
    /// Ordered task names; order defines logit order everywhere.
    pub tasks: Vec<String>,
}

impl MmoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.expert_dim == 0 {
            return Err(Error::config("mmoe: n_experts and expert_dim must be >= 1"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("mmoe: at least one task required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if t.is_empty() || !seen.insert(t) {
                return Err(Error::config(format!("mmoe: bad or duplicate task name {t:?}")));
            }
        }
        Ok(())
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::config(format!("unknown task {name}")))
    }
}

/// Create the head's parameters for a given hidden width.
pub fn init_mmoe_params(
    config: &MmoeConfig,
    hidden_width: usize,
    prefix: &str,
    store: &mut ParamStore,
    seed: u64,
) -> Result<()> {
    config.validate()?;
    let p = |s: &str| format!("{prefix}{s}");
    for e in 0..config.n_experts {
        store.insert_he(
            p(&format!("mmoe/expert{e}/w")),
            vec![hidden_width, config.expert_dim],
            hidden_width,
            seed,
        );
        store.insert_zeros(p(&format!("mmoe/expert{e}/b")), vec![config.expert_dim]);
    }
    for task in &config.tasks {
        store.insert_he(
            p(&format!("mmoe/gate/{task}/w")),
            vec![hidden_width, config.n_experts],
            hidden_width,
            seed,
        );
        store.insert_zeros(p(&format!("mmoe/gate/{task}/b")), vec![config.n_experts]);
        store.insert_he(
            p(&format!("mmoe/out/{task}/w")),
            vec![config.expert_dim, 1],
            config.expert_dim,
            seed,
        );
        store.insert_zeros(p(&format!("mmoe/out/{task}/b")), vec![1]);
    }
    Ok(())
}

/// Forward the head: hidden `[B x H]` to per-task logits `[B x T]`,
/// columns in task order. Also returns the per-task gate tensors.
pub fn mmoe_forward(
    g: &mut Graph,
    hidden: Var,
    config: &MmoeConfig,
    prefix: &str,
    params: &BoundParams,
) -> Result<MmoeOutput> {
    config.validate()?;
    let p = |s: &str| format!("{prefix}{s}");
    let batch = g.value(hidden).rows();

    let mut experts = Vec::with_capacity(config.n_experts);
    for e in 0..config.n_experts {
        let w = params.var(&p(&format!("mmoe/expert{e}/w")))?;
        let b = params.var(&p(&format!("mmoe/expert{e}/b")))?;
        let h = g.matmul(hidden, w)?;
        let hb = g.add_bias(h, b)?;
        experts.push(g.relu(hb));
    }

    let mut logits = Vec::with_capacity(config.tasks.len());
    let mut gates = Vec::with_capacity(config.tasks.len());
    for task in &config.tasks {
        let wg = params.var(&p(&format!("mmoe/gate/{task}/w")))?;
        let bg = params.var(&p(&format!("mmoe/gate/{task}/b")))?;
        let glin = g.matmul(hidden, wg)?;
        let gb = g.add_bias(glin, bg)?;
        let gate = g.softmax_rows(gb)?;
        gates.push(gate);

        let mut rep: Option<Var> = None;
        for (e, expert) in experts.iter().enumerate() {
            let col = g.slice_last(gate, e, 1)?;
            let col = g.reshape(col, vec![batch, 1])?;
            let weighted = g.scale_rows(*expert, col)?;
            rep = Some(match rep {
                None => weighted,
                Some(r) => g.add(r, weighted)?,
            });
        }
        let rep = rep.expect("n_experts >= 1");
        let wo = params.var(&p(&format!("mmoe/out/{task}/w")))?;
        let bo = params.var(&p(&format!("mmoe/out/{task}/b")))?;
        let lo = g.matmul(rep, wo)?;
        logits.push(g.add_bias(lo, bo)?);
    }
    let logits = if logits.len() == 1 {
        logits[0]
    } else {
        g.concat_last(&logits)?
    };
    Ok(MmoeOutput { logits, gates })
}

/// Logits `[B x T]` plus per-task gates `[B x n_experts]`.
pub struct MmoeOutput {
    pub logits: Var,
    pub gates: Vec<Var>,
}
