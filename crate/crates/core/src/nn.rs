//! Named parameter storage and the small layers shared by every model part.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dropout_mask, mix_seed, stream, Tape, Tensor, Var, LN_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named set of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, keeping names. Shapes must match.
    pub fn set_all(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::validation(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for ((name, old), new) in self.names.iter().zip(&self.tensors).zip(&values) {
            if old.shape() != new.shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.tensors = values;
        Ok(())
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps leaves created elsewhere, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Seeded initializer; weights uniform in `±1/√fan_in`, biases zero.
pub struct Init<R> {
    pub rng: R,
}

impl<R: Rng> Init<R> {
    pub fn uniform(&mut self, rows: usize, cols: usize, fan_in: usize) -> Tensor {
        Tensor::uniform(rows, cols, 1.0 / (fan_in as f64).sqrt(), &mut self.rng)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init.uniform(d_in, d_out, d_in));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, d_out)));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, d, 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, d)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias), LN_EPS)
    }
}

/// Source of train-time noise for one forward pass.
///
/// Every dropout or stochastic-depth site draws the next seed from a counter
/// mixed with the pass seed, so a forward pass is reproducible given its seed
/// and the order of calls.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    train: bool,
    seed: u64,
    counter: u64,
    pub dropout_rate: f64,
    pub drop_path_rate: f64,
}

impl ForwardCtx {
    pub fn train(seed: u64, dropout_rate: f64, drop_path_rate: f64) -> Self {
        Self {
            train: true,
            seed,
            counter: 0,
            dropout_rate,
            drop_path_rate,
        }
    }

    pub fn eval() -> Self {
        Self {
            train: false,
            seed: 0,
            counter: 0,
            dropout_rate: 0.0,
            drop_path_rate: 0.0,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn next_seed(&mut self) -> u64 {
        self.counter += 1;
        mix_seed(self.seed, &[self.counter])
    }

    /// Elementwise inverted dropout at the context rate.
    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if !self.train || self.dropout_rate == 0.0 {
            return Ok(x);
        }
        let (r, c) = tape.value(x).dims2();
        let seed = self.next_seed();
        let mask = dropout_mask(r, c, self.dropout_rate, seed)?;
        tape.mul_const(x, mask)
    }

    /// Stochastic depth: drops the whole residual branch `x` with the
    /// drop-path rate, scaling survivors by `1/(1-rate)`; identity at eval.
    pub fn drop_path(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if !self.train || self.drop_path_rate == 0.0 {
            return Ok(x);
        }
        let seed = self.next_seed();
        let keep = 1.0 - self.drop_path_rate;
        let kept = stream(seed, &[0x7364]).gen::<f64>() < keep;
        Ok(tape.scale(x, if kept { 1.0 / keep } else { 0.0 }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_init_bounds_and_zero_bias() {
        let mut store = ParamStore::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        let lin = Linear::new(&mut store, &mut init, "l", 16, 4, true);
        let bound = 1.0 / 4.0;
        assert!(store.get(lin.w).data().iter().all(|v| v.abs() <= bound));
        assert!(store.get(lin.b.unwrap()).data().iter().all(|&v| v == 0.0));
        assert_eq!(store.names(), &["l.w".to_string(), "l.b".to_string()]);
        assert_eq!(store.find("l.b"), lin.b);
    }

    #[test]
    fn eval_ctx_is_noise_free() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(2, 3, 1.5));
        let mut ctx = ForwardCtx::eval();
        assert_eq!(ctx.dropout(&mut tape, x).unwrap(), x);
        assert_eq!(ctx.drop_path(&mut tape, x).unwrap(), x);
    }

    #[test]
    fn drop_path_drops_whole_branch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(2, 3, 1.0));
        let mut ctx = ForwardCtx::train(5, 0.0, 0.5);
        let mut seen = [false, false];
        for _ in 0..64 {
            let y = ctx.drop_path(&mut tape, x).unwrap();
            let v = tape.value(y).data();
            assert!(v.iter().all(|&e| e == v[0]));
            seen[(v[0] > 0.0) as usize] = true;
            assert!(v[0] == 0.0 || v[0] == 2.0);
        }
        assert!(seen[0] && seen[1]);
    }
}
