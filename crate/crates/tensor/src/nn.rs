//! Parameterized layers built from tape primitives.

use rand::Rng;

use crate::activation::Activation;
use crate::error::{invalid, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Fully connected layer `x W + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.w"),
            glorot_uniform(rng, &[in_dim, out_dim], in_dim, out_dim),
        );
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn forward_act(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        act: Activation,
    ) -> Result<Var> {
        let y = self.forward(tape, store, x)?;
        Ok(tape.activation(y, act))
    }
}

/// Gated recurrent unit over rows: `h' = (1 - z) * h + z * n` with
/// update gate `z`, reset gate `r` and candidate
/// `n = tanh(x W_n + r * (h U_n) + b_n)`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub width: usize,
    z: Gate,
    r: Gate,
    n: Gate,
}

#[derive(Debug, Clone)]
struct Gate {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

impl Gate {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            w: store.add(format!("{name}.w"), glorot_uniform(rng, &[d, d], d, d)),
            u: store.add(format!("{name}.u"), glorot_uniform(rng, &[d, d], d, d)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            width,
            z: Gate::new(store, &format!("{name}.z"), width, rng),
            r: Gate::new(store, &format!("{name}.r"), width, rng),
            n: Gate::new(store, &format!("{name}.n"), width, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.z, &self.r, &self.n]
            .iter()
            .flat_map(|g| [g.w, g.u, g.b])
            .collect()
    }

    /// One step for every row: state `h` and input `x`, both `rows x width`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, x: Var) -> Result<Var> {
        let hs = tape.value(h).shape().to_vec();
        let xs = tape.value(x).shape().to_vec();
        if hs.len() != 2 || hs != xs || hs[1] != self.width {
            return Err(invalid(
                "gru_cell",
                format!(
                    "state {hs:?} and input {xs:?} must both be rows x {}",
                    self.width
                ),
            ));
        }
        let z = self.gate_pre(tape, store, &self.z, h, x, None)?;
        let z = tape.sigmoid(z);
        let r = self.gate_pre(tape, store, &self.r, h, x, None)?;
        let r = tape.sigmoid(r);
        let n = self.gate_pre(tape, store, &self.n, h, x, Some(r))?;
        let n = tape.tanh(n);
        // (1 - z) * h + z * n  ==  h + z * (n - h)
        let diff = tape.sub(n, h)?;
        let step = tape.mul(z, diff)?;
        tape.add(h, step)
    }

    fn gate_pre(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        gate: &Gate,
        h: Var,
        x: Var,
        reset: Option<Var>,
    ) -> Result<Var> {
        let w = tape.param(store, gate.w);
        let u = tape.param(store, gate.u);
        let b = tape.param(store, gate.b);
        let xw = tape.matmul(x, w)?;
        let mut hu = tape.matmul(h, u)?;
        if let Some(r) = reset {
            hu = tape.mul(r, hu)?;
        }
        let s = tape.add(xw, hu)?;
        tape.add_row(s, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn glorot_bounds() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let t = glorot_uniform(&mut rng, &[10, 20], 10, 20);
        let lim = (6.0f64 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= lim));
        assert_eq!(t.shape(), &[10, 20]);
    }

    #[test]
    fn gru_at_zero_parameters_halves_state() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, "gru", 3, &mut rng);
        for id in gru.param_ids() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 4.0]]).unwrap());
        let x = tape.constant(Tensor::from_rows(&[vec![0.3, 0.1, -0.7]]).unwrap());
        let y = gru.forward(&mut tape, &store, h, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn gru_rejects_width_mismatch() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, "gru", 4, &mut rng);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[1, 4]));
        let x = tape.constant(Tensor::zeros(&[1, 8]));
        let err = gru.forward(&mut tape, &store, h, x).unwrap_err();
        assert!(err.to_string().contains("gru_cell"));
    }

    #[test]
    fn dense_shapes() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "fc", 3, 5, true, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[7, 3]));
        let y = d.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[7, 5]);
        assert_eq!(store.num_scalars(), 20);
    }
}
