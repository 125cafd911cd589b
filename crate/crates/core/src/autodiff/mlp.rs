//! Sigmoid MLPs with first-class input Jacobians.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{sigmoid, Graph, Mat, NodeId};
use super::params::{glorot_uniform, ParamStore};
use crate::error::{Result, TsnetError};

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sigmoid,
    /// Affine hidden layers; the whole network is then a linear map.
    Identity,
}

/// Layer widths from input to output. Hidden layers use the logistic sigmoid,
/// the output layer is affine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_widths: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>) -> Result<Self> {
        if layer_widths.len() < 3 {
            return Err(TsnetError::Contract(format!(
                "an MLP needs at least one hidden layer, got widths {:?}",
                layer_widths
            )));
        }
        if layer_widths.contains(&0) {
            return Err(TsnetError::Contract(format!(
                "every layer width must be >= 1, got {:?}",
                layer_widths
            )));
        }
        Ok(Self {
            layer_widths,
            activation: Activation::Sigmoid,
        })
    }

    /// A network with identity hidden activations. A single layer (`[m, l]`)
    /// is allowed here, since the map is affine either way.
    pub fn linear(layer_widths: Vec<usize>) -> Result<Self> {
        if layer_widths.len() < 2 || layer_widths.contains(&0) {
            return Err(TsnetError::Contract(format!(
                "a linear network needs >= 2 positive widths, got {:?}",
                layer_widths
            )));
        }
        Ok(Self {
            layer_widths,
            activation: Activation::Identity,
        })
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Spec with `hidden` layers between `input` and `output`.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut w = Vec::with_capacity(hidden.len() + 2);
        w.push(input);
        w.extend_from_slice(hidden);
        w.push(output);
        Self::new(w)
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut tensors = Vec::with_capacity(2 * self.num_layers());
        for w in self.layer_widths.windows(2) {
            tensors.push(glorot_uniform(rng, w[0], w[1]));
            tensors.push(Array2::zeros((1, w[1])));
        }
        ParamStore::new(tensors)
    }

    /// Checks that `params` has the tensor layout this spec implies.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let t = params.tensors();
        if t.len() != 2 * self.num_layers() {
            return Err(TsnetError::shape(
                "mlp",
                format!(
                    "expected {} tensors for {} layers, got {}",
                    2 * self.num_layers(),
                    self.num_layers(),
                    t.len()
                ),
            ));
        }
        for (l, w) in self.layer_widths.windows(2).enumerate() {
            if t[2 * l].dim() != (w[0], w[1]) {
                return Err(TsnetError::shape(
                    format!("mlp layer {}", l),
                    format!("weight shape {:?}, expected {:?}", t[2 * l].dim(), (w[0], w[1])),
                ));
            }
            if t[2 * l + 1].dim() != (1, w[1]) {
                return Err(TsnetError::shape(
                    format!("mlp layer {}", l),
                    format!("bias shape {:?}, expected {:?}", t[2 * l + 1].dim(), (1, w[1])),
                ));
            }
        }
        Ok(())
    }
}

/// A spec together with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamStore,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let params = spec.init(rng);
        Self { spec, params }
    }
}

fn check_input(spec: &MlpSpec, width: usize) -> Result<()> {
    if width != spec.input_dim() {
        return Err(TsnetError::shape(
            "mlp layer 0",
            format!("input width {}, expected {}", width, spec.input_dim()),
        ));
    }
    Ok(())
}

/// Evaluates the network at a single input.
pub fn mlp_forward(spec: &MlpSpec, params: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    check_input(spec, x.len())?;
    let t = params.tensors();
    let mut h = Array1::from(x.to_vec());
    let last = spec.num_layers() - 1;
    for l in 0..spec.num_layers() {
        let mut z = h.dot(&t[2 * l]);
        z += &t[2 * l + 1].row(0);
        if l < last && spec.activation == Activation::Sigmoid {
            z.mapv_inplace(sigmoid);
        }
        h = z;
    }
    Ok(h.to_vec())
}

/// Input Jacobian at a single point, entry `(i, k) = ∂out_k / ∂x_i`.
pub fn mlp_input_jacobian(spec: &MlpSpec, params: &ParamStore, x: &[f64]) -> Result<Mat> {
    spec.check_params(params)?;
    check_input(spec, x.len())?;
    let mut g = Graph::new();
    let ids = params.bind_const(&mut g);
    let xn = g.constant(Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row"));
    let (_, jac) = mlp_graph_with_jacobian(&mut g, spec, &ids, xn)?;
    Ok(g.value(jac).clone())
}

fn check_bound(g: &Graph, spec: &MlpSpec, p: &[NodeId], x: NodeId) -> Result<()> {
    if p.len() != 2 * spec.num_layers() {
        return Err(TsnetError::shape(
            "mlp",
            format!("expected {} parameter nodes, got {}", 2 * spec.num_layers(), p.len()),
        ));
    }
    for (l, w) in spec.layer_widths.windows(2).enumerate() {
        if g.shape(p[2 * l]) != (w[0], w[1]) || g.shape(p[2 * l + 1]) != (1, w[1]) {
            return Err(TsnetError::shape(
                format!("mlp layer {}", l),
                format!(
                    "bound weight {:?} / bias {:?}, expected {:?} / {:?}",
                    g.shape(p[2 * l]),
                    g.shape(p[2 * l + 1]),
                    (w[0], w[1]),
                    (1, w[1])
                ),
            ));
        }
    }
    check_input(spec, g.shape(x).1)
}

/// Batched forward pass on the graph: `B x m -> B x out`.
pub fn mlp_graph(g: &mut Graph, spec: &MlpSpec, p: &[NodeId], x: NodeId) -> Result<NodeId> {
    check_bound(g, spec, p, x)?;
    let last = spec.num_layers() - 1;
    let mut h = x;
    for l in 0..spec.num_layers() {
        let z = g.matmul(h, p[2 * l])?;
        let z = g.add_row(z, p[2 * l + 1])?;
        h = if l < last && spec.activation == Activation::Sigmoid {
            g.sigmoid(z)
        } else {
            z
        };
    }
    Ok(h)
}

/// Batched forward pass that also propagates the `m` input tangents.
///
/// Returns `(out, jac)` with `out: B x l` and `jac: (B*m) x l`, where row
/// `b*m + i` of `jac` holds `∂out_b / ∂x_{b,i}`. The tangents are ordinary
/// graph nodes, so a backward sweep through `jac` differentiates the
/// Jacobian itself with respect to the parameters.
pub fn mlp_graph_with_jacobian(
    g: &mut Graph,
    spec: &MlpSpec,
    p: &[NodeId],
    x: NodeId,
) -> Result<(NodeId, NodeId)> {
    check_bound(g, spec, p, x)?;
    let b = g.shape(x).0;
    let m = spec.input_dim();
    let last = spec.num_layers() - 1;
    let mut h = x;
    let mut tangent: Option<NodeId> = None;
    for l in 0..spec.num_layers() {
        let z = g.matmul(h, p[2 * l])?;
        let z = g.add_row(z, p[2 * l + 1])?;
        // The seed tangent is the identity per sample, so the first layer's
        // tangent product is just the weight matrix tiled over the batch.
        let tz = match tangent {
            None => g.tile_rows(p[2 * l], b),
            Some(t) => g.matmul(t, p[2 * l])?,
        };
        if l < last && spec.activation == Activation::Identity {
            tangent = Some(tz);
            h = z;
        } else if l < last {
            let a = g.sigmoid(z);
            let a2 = g.square(a);
            let da = g.sub(a, a2)?;
            let da_rep = g.repeat_rows(da, m);
            tangent = Some(g.mul(tz, da_rep)?);
            h = a;
        } else {
            return Ok((z, tz));
        }
    }
    unreachable!("spec has at least one layer")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![2, 1]).is_err());
        assert!(MlpSpec::new(vec![2, 0, 1]).is_err());
        let s = MlpSpec::new(vec![2, 4, 1]).unwrap();
        assert_eq!(s.param_count(), 2 * 4 + 4 + 4 + 1);
        assert_eq!(s.init(&mut rng()).len(), s.param_count());
    }

    #[test]
    fn init_respects_glorot_bound() {
        let s = MlpSpec::new(vec![3, 5, 2]).unwrap();
        let p = s.init(&mut rng());
        let a0 = (6.0f64 / 8.0).sqrt();
        assert!(p.tensors()[0].iter().all(|v| v.abs() <= a0));
        assert!(p.tensors()[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_error_names_layer() {
        let s = MlpSpec::new(vec![2, 3, 1]).unwrap();
        let mut p = s.init(&mut rng());
        p.tensors_mut()[2] = Array2::zeros((4, 1));
        let err = mlp_forward(&s, &p, &[0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
        let p = s.init(&mut rng());
        let err = mlp_forward(&s, &p, &[0.0]).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn forward_is_deterministic_and_matches_graph() {
        let s = MlpSpec::new(vec![3, 6, 4, 2]).unwrap();
        let p = s.init(&mut rng());
        let x = [0.3, -1.2, 2.0];
        let a = mlp_forward(&s, &p, &x).unwrap();
        let b = mlp_forward(&s, &p, &x).unwrap();
        assert_eq!(a, b);

        let mut g = Graph::new();
        let ids = p.bind(&mut g);
        let xn = g.constant(array![[0.3, -1.2, 2.0]]);
        let out = mlp_graph(&mut g, &s, &ids, xn).unwrap();
        for k in 0..2 {
            assert!((g.value(out)[[0, k]] - a[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn batched_jacobian_rows_are_per_sample() {
        let s = MlpSpec::new(vec![2, 5, 3]).unwrap();
        let p = s.init(&mut rng());
        let xs = array![[0.1, 0.2], [-0.7, 1.5], [2.0, -0.3]];
        let mut g = Graph::new();
        let ids = p.bind_const(&mut g);
        let xn = g.constant(xs.clone());
        let (_, jac) = mlp_graph_with_jacobian(&mut g, &s, &ids, xn).unwrap();
        assert_eq!(g.shape(jac), (6, 3));
        for b in 0..3 {
            let single = mlp_input_jacobian(&s, &p, &xs.row(b).to_vec()).unwrap();
            for i in 0..2 {
                for k in 0..3 {
                    assert!((g.value(jac)[[b * 2 + i, k]] - single[[i, k]]).abs() < 1e-15);
                }
            }
        }
    }
}
