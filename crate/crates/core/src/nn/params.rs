use ndarray::{Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::Real;
use crate::{Error, Result};

/// Named dense arrays. Shapes are fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F: Real> {
    names: Vec<String>,
    tensors: Vec<Array2<F>>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<F>) {
        self.names.push(name.into());
        self.tensors.push(value);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<F>] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> &Array2<F> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Array2<F> {
        &mut self.tensors[i]
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(|t| t.dim()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// All entries concatenated in declaration order.
    pub fn flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend(t.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[F]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape(
                format!("{} scalars", self.num_scalars()),
                format!("{}", flat.len()),
            ));
        }
        let mut k = 0;
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn check_same_layout(&self, other: &ParamSet<F>) -> Result<()> {
        if self.shapes() != other.shapes() {
            return Err(Error::shape(
                format!("{:?}", self.shapes()),
                format!("{:?}", other.shapes()),
            ));
        }
        Ok(())
    }

    /// Register every tensor as a graph leaf. `trainable = false` records them
    /// as constants so no gradient is accumulated for them.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Elementwise `self <- tau * source + (1 - tau) * self`.
    pub fn polyak_from(&mut self, source: &ParamSet<F>, tau: F) -> Result<()> {
        self.check_same_layout(source)?;
        if !(tau >= F::zero() && tau <= F::one()) {
            return Err(Error::InvalidArgument(format!("tau={tau} outside [0,1]")));
        }
        let keep = F::one() - tau;
        for (t, s) in self.tensors.iter_mut().zip(&source.tensors) {
            Zip::from(t).and(s).for_each(|t, &s| *t = tau * s + keep * *t);
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| G::lit(v.as_f64())))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply_graph<F: Real>(self, g: &mut Graph<F>, x: NodeId) -> NodeId {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }

    pub fn apply_inplace<F: Real>(self, x: &mut Array2<F>) {
        match self {
            Activation::Tanh => x.mapv_inplace(|v| v.tanh_fast()),
            Activation::Relu => x.mapv_inplace(|v| v.max(F::zero())),
            Activation::Identity => {}
        }
    }
}

/// Uniform fan-in initialisation `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_linear<F: Real, R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    scale: f64,
    rng: &mut R,
) -> (Array2<F>, Array2<F>) {
    let bound = scale / (fan_in as f64).sqrt();
    let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
        F::lit(rng.random_range(-bound..=bound))
    });
    let b = Array2::from_shape_fn((1, fan_out), |_| F::lit(rng.random_range(-bound..=bound)));
    (w, b)
}

/// Multilayer perceptron. Layer `i` owns tensors `2i` (weights, in x out) and
/// `2i + 1` (bias, 1 x out). The hidden activation is applied after every layer
/// except the last, unless `activate_output` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<F: Real> {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub activate_output: bool,
    pub params: ParamSet<F>,
}

impl<F: Real> Mlp<F> {
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activation: Activation,
        activate_output: bool,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut params = ParamSet::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let (wt, b) = init_linear(w[0], w[1], 1.0, rng);
            params.push(format!("l{i}.w"), wt);
            params.push(format!("l{i}.b"), b);
        }
        Self {
            sizes: sizes.to_vec(),
            activation,
            activate_output,
            params,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Graph forward with explicit parameter handles (from `params.bind`).
    pub fn forward(&self, g: &mut Graph<F>, handles: &[NodeId], x: NodeId) -> Result<NodeId> {
        forward_layers(
            g,
            handles,
            x,
            self.n_layers(),
            self.activation,
            self.activate_output,
        )
    }

    /// Inference-only forward.
    pub fn forward_array(&self, x: &Array2<F>) -> Result<Array2<F>> {
        forward_layers_array(
            &self.params,
            0,
            x,
            self.n_layers(),
            self.activation,
            self.activate_output,
        )
    }
}

pub(crate) fn forward_layers<F: Real>(
    g: &mut Graph<F>,
    handles: &[NodeId],
    mut x: NodeId,
    n_layers: usize,
    act: Activation,
    activate_output: bool,
) -> Result<NodeId> {
    for i in 0..n_layers {
        let h = g.matmul(x, handles[2 * i])?;
        x = g.add_bias(h, handles[2 * i + 1])?;
        if i + 1 < n_layers || activate_output {
            x = act.apply_graph(g, x);
        }
    }
    Ok(x)
}

pub(crate) fn forward_layers_array<F: Real>(
    params: &ParamSet<F>,
    offset: usize,
    x: &Array2<F>,
    n_layers: usize,
    act: Activation,
    activate_output: bool,
) -> Result<Array2<F>> {
    let mut cur: Option<Array2<F>> = None;
    for i in 0..n_layers {
        let w = params.get(offset + 2 * i);
        let b = params.get(offset + 2 * i + 1);
        let input = cur.as_ref().unwrap_or(x);
        if input.ncols() != w.nrows() {
            return Err(Error::shape(
                format!("{} input features", w.nrows()),
                format!("{}", input.ncols()),
            ));
        }
        let mut h = input.dot(w);
        h += b;
        if i + 1 < n_layers || activate_output {
            act.apply_inplace(&mut h);
        }
        cur = Some(h);
    }
    Ok(cur.unwrap_or_else(|| x.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn zero_weight_network_outputs_biases() {
        let mut r = rng::derive(0, 0);
        let mut mlp = Mlp::<f64>::new(&[3, 4, 2], Activation::Identity, false, &mut r);
        for i in 0..mlp.params.len() {
            if i % 2 == 0 {
                mlp.params.get_mut(i).fill(0.0);
            }
        }
        let x = array![[1.0, -2.0, 0.5]];
        let out = mlp.forward_array(&x).unwrap();
        assert_eq!(out, mlp.params.get(3).clone());
    }

    #[test]
    fn single_identity_layer_is_affine() {
        let mut r = rng::derive(1, 0);
        let mlp = Mlp::<f64>::new(&[2, 3], Activation::Tanh, false, &mut r);
        let x = array![[0.3, -0.7]];
        let expect = x.dot(mlp.params.get(0)) + mlp.params.get(1);
        assert_eq!(mlp.forward_array(&x).unwrap(), expect);
    }

    #[test]
    fn fixed_seed_is_deterministic_and_graph_matches_array_path() {
        let a = Mlp::<f64>::new(&[4, 8, 8, 1], Activation::Tanh, false, &mut rng::derive(9, 1));
        let b = Mlp::<f64>::new(&[4, 8, 8, 1], Activation::Tanh, false, &mut rng::derive(9, 1));
        assert_eq!(a, b);
        let x = array![[0.1, 0.2, -0.3, 0.4], [1.0, 0.0, 0.0, -1.0]];
        let y = a.forward_array(&x).unwrap();
        let mut g = Graph::new();
        let h = a.params.bind(&mut g, true);
        let xi = g.constant(x.clone());
        let out = a.forward(&mut g, &h, xi).unwrap();
        assert_eq!(g.value(out), &y);
        assert_eq!(y, b.forward_array(&x).unwrap());
    }

    #[test]
    fn input_shape_mismatch_rejected() {
        let mlp = Mlp::<f64>::new(&[3, 2], Activation::Tanh, false, &mut rng::derive(0, 0));
        assert!(mlp.forward_array(&array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn polyak_edge_cases() {
        let mut target = ParamSet::<f64>::new();
        target.push("w", Array2::zeros((2, 2)));
        let mut source = ParamSet::<f64>::new();
        source.push("w", Array2::ones((2, 2)));

        let mut t = target.clone();
        t.polyak_from(&source, 0.0).unwrap();
        assert_eq!(t, target);

        let mut t = target.clone();
        t.polyak_from(&source, 1.0).unwrap();
        assert_eq!(t.get(0), source.get(0));

        let mut t = target.clone();
        t.polyak_from(&source, 0.005).unwrap();
        assert!(t.get(0).iter().all(|&v| (v - 0.005).abs() < 1e-15));

        let mut bad = ParamSet::<f64>::new();
        bad.push("w", Array2::ones((3, 2)));
        assert!(t.polyak_from(&bad, 0.5).is_err());
        assert!(t.polyak_from(&source, 1.5).is_err());
    }
}
