use rand::Rng;

use super::{Graph, NumError, ParamId, ParamStore, Var};

/// Parameters of one LSTM cell: a fused `4H × (input + H)` gate matrix and a
/// `4H` bias, gate blocks ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self, NumError> {
        let weight = store.add_xavier(format!("{prefix}.weight"), 4 * hidden_dim, input_dim + hidden_dim, rng)?;
        let bias = store.add(format!("{prefix}.bias"), super::Tensor::zeros(&[4 * hidden_dim]))?;
        Ok(Self { weight, bias, input_dim, hidden_dim })
    }

    /// Binds to parameters already present in `store` (e.g. after loading).
    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self, NumError> {
        let weight = store
            .id(&format!("{prefix}.weight"))
            .ok_or_else(|| NumError::MissingParam(format!("{prefix}.weight")))?;
        let bias = store
            .id(&format!("{prefix}.bias"))
            .ok_or_else(|| NumError::MissingParam(format!("{prefix}.bias")))?;
        let w = store.get(weight);
        let hidden_dim = w.rows() / 4;
        Ok(Self { weight, bias, input_dim: w.cols() - hidden_dim, hidden_dim })
    }

    /// One recurrent step; returns `(hidden, cell)`.
    pub fn step(&self, g: &mut Graph<'_>, prev_hidden: Var, prev_cell: Var, input: Var) -> Result<(Var, Var), NumError> {
        lstm_cell(g, prev_hidden, prev_cell, input, self)
    }
}

/// Standard LSTM update:
/// `c = f∘c_prev + i∘g`, `h = o∘tanh(c)` with sigmoid gates `i, f, o` and
/// `tanh` candidate `g`, all computed from `W [x; h_prev] + b`.
pub fn lstm_cell(
    g: &mut Graph<'_>,
    prev_hidden: Var,
    prev_cell: Var,
    input: Var,
    cell: &LstmCell,
) -> Result<(Var, Var), NumError> {
    let h = cell.hidden_dim;
    for (what, v, want) in [("hidden", prev_hidden, h), ("cell", prev_cell, h), ("input", input, cell.input_dim)] {
        let got = g.value(v).len();
        if got != want {
            return Err(NumError::Shape(format!("lstm {what} has {got} entries, expected {want}")));
        }
    }
    let w = g.param(cell.weight)?;
    let b = g.param(cell.bias)?;
    let xh = g.concat(&[input, prev_hidden])?;
    let pre = g.matvec(w, xh)?;
    let pre = g.add(pre, b)?;
    let i_pre = g.slice(pre, 0, h)?;
    let f_pre = g.slice(pre, h, h)?;
    let c_pre = g.slice(pre, 2 * h, h)?;
    let o_pre = g.slice(pre, 3 * h, h)?;
    let i = g.sigmoid(i_pre)?;
    let f = g.sigmoid(f_pre)?;
    let cand = g.tanh(c_pre)?;
    let o = g.sigmoid(o_pre)?;
    let keep = g.mul(f, prev_cell)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let hidden = g.mul(o, tc)?;
    Ok((hidden, c))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numcore::{gradient_check, GradCheckConfig, Tensor};

    #[test]
    fn zero_params_give_zero_hidden() {
        let mut store = ParamStore::new();
        let cell = LstmCell {
            weight: store.add("w", Tensor::zeros(&[12, 5])).unwrap(),
            bias: store.add("b", Tensor::zeros(&[12])).unwrap(),
            input_dim: 2,
            hidden_dim: 3,
        };
        let mut g = Graph::with_params(&store);
        let h0 = g.vector(vec![0.0; 3]);
        let c0 = g.vector(vec![0.0; 3]);
        let x = g.vector(vec![0.4, -2.0]);
        let (h, c) = cell.step(&mut g, h0, c0, x).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_weights_zero_state_zero_input() {
        let mut store = ParamStore::new();
        let cell = LstmCell {
            weight: store.add("w", Tensor::filled(&[4, 2], 1.0)).unwrap(),
            bias: store.add("b", Tensor::zeros(&[4])).unwrap(),
            input_dim: 1,
            hidden_dim: 1,
        };
        let mut g = Graph::with_params(&store);
        let h0 = g.vector(vec![0.0]);
        let c0 = g.vector(vec![0.0]);
        let x = g.vector(vec![0.0]);
        let (h, _) = cell.step(&mut g, h0, c0, x).unwrap();
        assert_eq!(g.scalar(h), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", 2, 3, &mut rng).unwrap();
        let mut g = Graph::with_params(&store);
        let h0 = g.vector(vec![0.0; 2]);
        let c0 = g.vector(vec![0.0; 3]);
        let x = g.vector(vec![0.0; 2]);
        assert!(matches!(cell.step(&mut g, h0, c0, x), Err(NumError::Shape(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 3, &mut rng).unwrap();
        let bias = store.get_mut(cell.bias);
        for (k, v) in bias.data_mut().iter_mut().enumerate() {
            *v = 0.1 * (k as f64 - 5.0);
        }
        let h0 = store.add("h0", Tensor::vector(vec![0.3, -0.2, 0.5])).unwrap();
        let c0 = store.add("c0", Tensor::vector(vec![-0.4, 0.1, 0.2])).unwrap();
        let x = store.add("x", Tensor::vector(vec![1.0, -0.5, 0.25])).unwrap();
        let report = gradient_check(&store, &GradCheckConfig::default(), |g| {
            let (h0, c0, x) = (g.param(h0)?, g.param(c0)?, g.param(x)?);
            let (h1, c1) = cell.step(g, h0, c0, x)?;
            let (h2, _) = cell.step(g, h1, c1, x)?;
            let w = g.vector(vec![1.0, -2.0, 0.5]);
            g.dot(h2, w)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
