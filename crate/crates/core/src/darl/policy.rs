use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::tensor::{dot, matvec, softmax};
use crate::numcore::{Graph, LstmCell, NumError, ParamId, ParamStore, Tensor, Var};

use super::DarlError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub dim: usize,
    /// Recurrent width; 0 means `2·dim`.
    pub hidden: usize,
}

impl PolicyConfig {
    pub fn hidden_width(&self) -> usize {
        if self.hidden == 0 {
            2 * self.dim
        } else {
            self.hidden
        }
    }
}

/// Parameters of both agents. Each agent has its own LSTM; the hidden input
/// at step `l > 0` is a learned mix of both agents' previous outputs.
#[derive(Clone, Debug)]
pub struct DualPolicy {
    pub dim: usize,
    pub hidden: usize,
    pub category_lstm: LstmCell,
    pub entity_lstm: LstmCell,
    /// `H × 2H`, applied to `[y_category; y_entity]`.
    pub category_mix: ParamId,
    /// `H × 2H`, applied to `[y_entity; y_category]`.
    pub entity_mix: ParamId,
    /// `H × (2d + H)` over `[user; category; y]`.
    pub category_w1: ParamId,
    /// `d × H`.
    pub category_w2: ParamId,
    /// `H × (3d + H)` over `[entity; arrival relation; y; category action]`.
    pub entity_w1: ParamId,
    /// `2d × H`.
    pub entity_w2: ParamId,
    /// Relation vector for "no relation": the start of an episode and the
    /// entity self-loop.
    pub start: ParamId,
}

/// Recurrent state after one step; cells stay per agent.
#[derive(Clone, Copy, Debug)]
pub struct History {
    pub y_category: Var,
    pub y_entity: Var,
    pub cell_category: Var,
    pub cell_entity: Var,
}

const PREFIX: &str = "policy";

impl DualPolicy {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &PolicyConfig, rng: &mut R) -> Result<Self, DarlError> {
        let (d, h) = (cfg.dim, cfg.hidden_width());
        if d == 0 {
            return Err(DarlError::Config("embedding dimension must be positive".into()));
        }
        LstmCell::new(store, &format!("{PREFIX}.category_lstm"), 2 * d, h, rng)?;
        LstmCell::new(store, &format!("{PREFIX}.entity_lstm"), 3 * d, h, rng)?;
        store.add_xavier(format!("{PREFIX}.category_mix"), h, 2 * h, rng)?;
        store.add_xavier(format!("{PREFIX}.entity_mix"), h, 2 * h, rng)?;
        store.add_xavier(format!("{PREFIX}.category_w1"), h, 2 * d + h, rng)?;
        store.add_xavier(format!("{PREFIX}.category_w2"), d, h, rng)?;
        store.add_xavier(format!("{PREFIX}.entity_w1"), h, 3 * d + h, rng)?;
        store.add_xavier(format!("{PREFIX}.entity_w2"), 2 * d, h, rng)?;
        store.add_uniform(format!("{PREFIX}.start"), &[d], 1.0 / (d as f64).sqrt(), rng)?;
        Self::bind(store)
    }

    pub fn bind(store: &ParamStore) -> Result<Self, DarlError> {
        let id = |name: &str| {
            let full = format!("{PREFIX}.{name}");
            store.id(&full).ok_or(NumError::MissingParam(full))
        };
        let start = id("start")?;
        let category_lstm = LstmCell::bind(store, &format!("{PREFIX}.category_lstm"))?;
        let dim = store.get(start).len();
        let hidden = category_lstm.hidden_dim;
        let policy = Self {
            dim,
            hidden,
            category_lstm,
            entity_lstm: LstmCell::bind(store, &format!("{PREFIX}.entity_lstm"))?,
            category_mix: id("category_mix")?,
            entity_mix: id("entity_mix")?,
            category_w1: id("category_w1")?,
            category_w2: id("category_w2")?,
            entity_w1: id("entity_w1")?,
            entity_w2: id("entity_w2")?,
            start,
        };
        policy.check_shapes(store)?;
        Ok(policy)
    }

    fn check_shapes(&self, store: &ParamStore) -> Result<(), DarlError> {
        let (d, h) = (self.dim, self.hidden);
        let want = [
            (self.category_lstm.weight, vec![4 * h, 2 * d + h]),
            (self.entity_lstm.weight, vec![4 * h, 3 * d + h]),
            (self.category_mix, vec![h, 2 * h]),
            (self.entity_mix, vec![h, 2 * h]),
            (self.category_w1, vec![h, 2 * d + h]),
            (self.category_w2, vec![d, h]),
            (self.entity_w1, vec![h, 3 * d + h]),
            (self.entity_w2, vec![2 * d, h]),
        ];
        for (id, shape) in want {
            if store.get(id).shape() != shape.as_slice() {
                return Err(DarlError::Config(format!(
                    "{} has shape {:?}, expected {:?}",
                    store.name(id),
                    store.get(id).shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.category_lstm.weight,
            self.category_lstm.bias,
            self.entity_lstm.weight,
            self.entity_lstm.bias,
            self.category_mix,
            self.entity_mix,
            self.category_w1,
            self.category_w2,
            self.entity_w1,
            self.entity_w2,
            self.start,
        ]
    }

    /// Columns of the entity head's first matrix that read the category
    /// action; zeroing them removes the entity agent's dependence on it.
    pub fn condition_columns(&self) -> std::ops::Range<usize> {
        let start = 2 * self.dim + self.hidden;
        start..start + self.dim
    }

    /// One recurrent step. `category_input` is `[user; category]` and
    /// `entity_input` is `[user; arrival relation; entity]`.
    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        prev: Option<&History>,
        category_input: Var,
        entity_input: Var,
    ) -> Result<History, NumError> {
        let (hin_c, cell_c, hin_e, cell_e) = match prev {
            None => {
                let z = g.constant(Tensor::zeros(&[self.hidden]));
                (z, z, z, z)
            }
            Some(p) => {
                let wc = g.param(self.category_mix)?;
                let we = g.param(self.entity_mix)?;
                let ce = g.concat(&[p.y_category, p.y_entity])?;
                let ec = g.concat(&[p.y_entity, p.y_category])?;
                (g.matvec(wc, ce)?, p.cell_category, g.matvec(we, ec)?, p.cell_entity)
            }
        };
        let (y_category, cell_category) = self.category_lstm.step(g, hin_c, cell_c, category_input)?;
        let (y_entity, cell_entity) = self.entity_lstm.step(g, hin_e, cell_e, entity_input)?;
        Ok(History { y_category, y_entity, cell_category, cell_entity })
    }

    /// Logits over category actions; `actions` holds one embedding per action.
    pub fn category_logits(&self, g: &mut Graph<'_>, user: Var, category: Var, y: Var, actions: &[Var]) -> Result<Var, NumError> {
        let w1 = g.param(self.category_w1)?;
        let w2 = g.param(self.category_w2)?;
        let x = g.concat(&[user, category, y])?;
        let hid = g.matvec(w1, x)?;
        let hid = g.relu(hid)?;
        let out = g.matvec(w2, hid)?;
        g.row_dots(actions, out)
    }

    /// Logits over entity actions. An action's embedding is
    /// `[relation; target]`, passed as parallel row lists.
    #[allow(clippy::too_many_arguments)]
    pub fn entity_logits(
        &self,
        g: &mut Graph<'_>,
        entity: Var,
        arrival: Var,
        y: Var,
        category_action: Var,
        relations: &[Var],
        targets: &[Var],
    ) -> Result<Var, NumError> {
        let w1 = g.param(self.entity_w1)?;
        let w2 = g.param(self.entity_w2)?;
        let x = g.concat(&[entity, arrival, y, category_action])?;
        let hid = g.matvec(w1, x)?;
        let hid = g.relu(hid)?;
        let out = g.matvec(w2, hid)?;
        let out_r = g.slice(out, 0, self.dim)?;
        let out_e = g.slice(out, self.dim, self.dim)?;
        let by_relation = g.row_dots(relations, out_r)?;
        let by_target = g.row_dots(targets, out_e)?;
        g.add(by_relation, by_target)
    }
}

/// Entity-action distributions under each candidate category action,
/// evaluated on plain values. `state` is `[entity; arrival; y]`; the part
/// of the first layer that reads it is computed once.
pub fn entity_distributions(
    policy: &DualPolicy,
    store: &ParamStore,
    state: &[f64],
    category_actions: &[&[f64]],
    relations: &[&[f64]],
    targets: &[&[f64]],
) -> Vec<Vec<f64>> {
    let (d, h) = (policy.dim, policy.hidden);
    let w1 = store.get(policy.entity_w1).data();
    let w2 = store.get(policy.entity_w2).data();
    let cols = 3 * d + h;
    let state_cols = 2 * d + h;
    let shared: Vec<f64> = (0..h)
        .map(|r| dot(&w1[r * cols..r * cols + state_cols], state))
        .collect();
    category_actions
        .iter()
        .map(|c| {
            let hid: Vec<f64> = (0..h)
                .map(|r| (shared[r] + dot(&w1[r * cols + state_cols..(r + 1) * cols], c)).max(0.0))
                .collect();
            let out = matvec(w2, 2 * d, h, &hid);
            let logits: Vec<f64> = relations
                .iter()
                .zip(targets)
                .map(|(r, t)| dot(r, &out[..d]) + dot(t, &out[d..]))
                .collect();
            softmax(&logits)
        })
        .collect()
}
