use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tape::{sigmoid, Gradients, Tape, Var};
use crate::numcore::{Matrix, Scalar};
use crate::rng::Rng;

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Gelu,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => crate::numcore::tape::gelu(x),
            Activation::Identity => x,
        }
    }

    fn on_tape<T: Scalar>(self, tape: &mut Tape<T>, v: Var) -> Var {
        match self {
            Activation::Silu => tape.silu(v),
            Activation::Gelu => tape.gelu(v),
            Activation::Identity => v,
        }
    }
}

/// One affine layer: `y = x Wᵀ + b`, `W: (out, in)`, `b: (1, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(weight: Matrix<T>, bias: Matrix<T>) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.rows() {
            return Err(Error::shape(
                "Dense::new",
                format!("bias 1x{}", weight.rows()),
                format!("{}x{}", bias.rows(), bias.cols()),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_width(&self) -> usize {
        self.weight.rows()
    }
}

/// Parameters of a fully connected network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    layers: Vec<Dense<T>>,
    activation: Activation,
}

/// Tape handles for each layer's `(weight, bias)`.
#[derive(Clone, Debug)]
pub struct MlpVars {
    vars: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn iter(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Per-tensor gradients, ordered `[W0, b0, W1, b1, ...]`.
pub type MlpGrads<T> = Vec<Matrix<T>>;

impl<T: Scalar> MlpParams<T> {
    /// Builds a network from layers, checking that consecutive widths compose.
    pub fn from_layers(layers: Vec<Dense<T>>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_width() != pair[1].in_width() {
                return Err(Error::shape(
                    "MlpParams::from_layers",
                    format!("layer {} input width {}", k + 1, pair[0].out_width()),
                    pair[1].in_width(),
                ));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Glorot-uniform weights, zero biases. `widths` lists every layer width
    /// including input and output.
    pub fn glorot(widths: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("bad layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Matrix::from_fn(fan_out, fan_in, |_, _| T::lit(rng.uniform_range(-limit, limit)));
                Dense {
                    weight,
                    bias: Matrix::zeros(1, fan_out),
                }
            })
            .collect();
        Self::from_layers(layers, activation)
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].out_width()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width())
            .chain(self.layers.iter().map(Dense::out_width))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_width() {
            return Err(Error::shape("mlp_forward", format!("{} input columns", self.input_width()), cols));
        }
        Ok(())
    }

    /// Evaluates the network on a batch without recording a tape.
    pub fn forward(&self, input: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(input.cols())?;
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul_t(&layer.weight)?;
            let bias = layer.bias.as_slice();
            let act = self.activation;
            for r in 0..z.rows() {
                for (v, &b) in z.row_mut(r).iter_mut().zip(bias) {
                    *v += b;
                    if k != last {
                        *v = act.apply(*v);
                    }
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Places every tensor on `tape` as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> MlpVars {
        MlpVars {
            vars: self
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
        }
    }

    /// Places every tensor on `tape` as a constant.
    pub fn register_frozen(&self, tape: &mut Tape<T>) -> MlpVars {
        MlpVars {
            vars: self
                .layers
                .iter()
                .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
                .collect(),
        }
    }

    /// Records a forward pass. With `dropout = Some((p, rng))`, hidden
    /// activations are zeroed with probability `p` and rescaled by `1/(1-p)`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &MlpVars,
        input: Var,
        mut dropout: Option<(f64, &mut Rng)>,
    ) -> Result<Var> {
        self.check_input(tape.value(input).cols())?;
        let last = self.layers.len() - 1;
        let mut h = input;
        for (k, &(w, b)) in vars.vars.iter().enumerate() {
            let z = tape.matmul_t(h, w)?;
            let z = tape.add_row(z, b)?;
            h = if k == last {
                z
            } else {
                let a = self.activation.on_tape(tape, z);
                match dropout.as_mut() {
                    Some((p, rng)) if *p > 0.0 => {
                        let (r, c) = tape.value(a).shape();
                        let keep = 1.0 - *p;
                        let mask = Matrix::from_fn(r, c, |_, _| {
                            if rng.uniform() < keep {
                                T::lit(1.0 / keep)
                            } else {
                                T::zero()
                            }
                        });
                        tape.mul_const(a, mask)?
                    }
                    _ => a,
                }
            };
        }
        Ok(h)
    }

    /// Collects this network's gradients from a backward pass.
    pub fn collect_grads(&self, grads: &Gradients<T>, vars: &MlpVars) -> MlpGrads<T> {
        vars.iter().map(|v| grads.wrt(v)).collect()
    }

    /// Applies `f` to every parameter alongside the matching entry of `other`.
    pub fn zip_update(&mut self, other: &Self, f: impl Fn(T, T) -> T) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x = f(*x, y);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> MlpParams<U> {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            activation: self.activation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(w: &[&[f64]], b: &[f64]) -> Dense<f64> {
        Dense::new(Matrix::from_rows(w).unwrap(), Matrix::from_rows(&[b]).unwrap()).unwrap()
    }

    #[test]
    fn single_affine_layer() {
        let net = MlpParams::from_layers(vec![dense(&[&[2.0]], &[1.0])], Activation::Silu).unwrap();
        let y = net.forward(&Matrix::from_rows(&[[3.0]]).unwrap()).unwrap();
        assert_eq!(y.as_slice(), &[7.0]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut rng = Rng::new(0);
        let mut net = MlpParams::<f64>::glorot(&[3, 5, 2], Activation::Silu, &mut rng).unwrap();
        for t in net.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        let x = rng.normal_matrix(4, 3);
        assert!(net.forward(&x).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_composition() {
        let eye = || dense(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]);
        let net = MlpParams::from_layers(vec![eye(), eye()], Activation::Identity).unwrap();
        let y = net.forward(&Matrix::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn input_width_mismatch_is_rejected() {
        let mut rng = Rng::new(0);
        let net = MlpParams::<f64>::glorot(&[3, 4, 2], Activation::Silu, &mut rng).unwrap();
        let err = net.forward(&Matrix::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }

    #[test]
    fn incompatible_layers_are_rejected() {
        let a = dense(&[&[1.0, 0.0]], &[0.0]);
        let b = dense(&[&[1.0, 0.0]], &[0.0]);
        assert!(MlpParams::from_layers(vec![a, b], Activation::Silu).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = Rng::new(11);
        for act in [Activation::Silu, Activation::Gelu] {
            let net = MlpParams::<f64>::glorot(&[3, 8, 8, 2], act, &mut rng).unwrap();
            let x = rng.normal_matrix(5, 3);
            let mut tape = Tape::new();
            let vars = net.register(&mut tape);
            let xin = tape.constant(x.clone());
            let y = net.forward_tape(&mut tape, &vars, xin, None).unwrap();
            let plain = net.forward(&x).unwrap();
            for (a, b) in tape.value(y).as_slice().iter().zip(plain.as_slice()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn glorot_respects_limit() {
        let mut rng = Rng::new(5);
        let net = MlpParams::<f64>::glorot(&[10, 64, 2], Activation::Silu, &mut rng).unwrap();
        let limit = (6.0f64 / 74.0).sqrt();
        assert!(net.layers()[0].weight.max_abs() <= limit);
    }
}
