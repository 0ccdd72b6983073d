//! Multi-graph convolution: `H' = ReLU(Σ_g f(A_g) · H · W)` over the three
//! normalized adjacencies of a snapshot.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

/// distance, functional, road
pub const GRAPH_COUNT: usize = 3;
pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_WIDTH: usize = 64;

/// One layer's transform: a single matrix shared by all graph terms, or one
/// per graph when `per_graph` weights are enabled.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayerParameters<T> {
    pub weights: Vec<Tensor<T>>,
}

impl<T: Scalar> GcnLayerParameters<T> {
    pub fn shared(w: Tensor<T>) -> Self {
        GcnLayerParameters { weights: vec![w] }
    }

    /// Glorot-uniform initialization.
    pub fn init<R: Rng>(input: usize, output: usize, per_graph: bool, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let count = if per_graph { GRAPH_COUNT } else { 1 };
        let weights = (0..count)
            .map(|_| {
                let data = (0..input * output)
                    .map(|_| T::lit(rng.random_range(-bound..bound)))
                    .collect();
                Tensor::matrix(input, output, data).expect("nonzero shape")
            })
            .collect();
        GcnLayerParameters { weights }
    }

    pub fn input_width(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_width(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn per_graph(&self) -> bool {
        self.weights.len() == GRAPH_COUNT
    }

    fn weight_for(&self, graph: usize) -> &Tensor<T> {
        &self.weights[if self.per_graph() { graph } else { 0 }]
    }

    pub fn names(layer: usize, per_graph: bool) -> Vec<String> {
        if per_graph {
            ["distance", "functional", "road"]
                .iter()
                .map(|g| format!("gcn.{layer}.w.{g}"))
                .collect()
        } else {
            vec![format!("gcn.{layer}.w")]
        }
    }

    pub fn push_into(self, layer: usize, params: &mut ParamSet<T>) {
        let names = Self::names(layer, self.per_graph());
        for (name, w) in names.into_iter().zip(self.weights) {
            params.push(name, w);
        }
    }
}

fn check_graphs<T: Scalar>(n: usize, graphs: &[Tensor<T>; GRAPH_COUNT]) -> Result<()> {
    for g in graphs {
        if g.shape() != [n, n] {
            return Err(Error::dim("multigraph_conv_layer", &[n, n], g.shape()));
        }
    }
    Ok(())
}

/// `ReLU(Σ_g f(A_g) · H · W_g)`; `graphs` must already be normalized.
pub fn multigraph_conv_layer<T: Scalar>(
    h: &Tensor<T>,
    graphs: &[Tensor<T>; GRAPH_COUNT],
    layer: &GcnLayerParameters<T>,
) -> Result<Tensor<T>> {
    check_graphs(h.rows(), graphs)?;
    let mut acc: Option<Tensor<T>> = None;
    for (g, a) in graphs.iter().enumerate() {
        let term = a.matmul(h)?.matmul(layer.weight_for(g))?;
        acc = Some(match acc {
            None => term,
            Some(mut sum) => {
                for (s, t) in sum.data_mut().iter_mut().zip(term.data()) {
                    *s += *t;
                }
                sum
            }
        });
    }
    let mut out = acc.expect("three graph terms");
    for v in out.data_mut() {
        *v = v.max(T::zero());
    }
    Ok(out)
}

/// Applies every layer in order; zero layers pass `h0` through.
pub fn encode_network<T: Scalar>(
    h0: &Tensor<T>,
    graphs: &[Tensor<T>; GRAPH_COUNT],
    layers: &[GcnLayerParameters<T>],
) -> Result<Tensor<T>> {
    layers
        .iter()
        .try_fold(h0.clone(), |h, layer| multigraph_conv_layer(&h, graphs, layer))
}

/// Graph operators recorded as tape constants. With shared weights the three
/// graphs are summed once, since `Σ_g f(A_g) H W = (Σ_g f(A_g)) H W`.
#[derive(Clone, Debug)]
pub enum GraphVars {
    Summed(Var),
    Separate([Var; GRAPH_COUNT]),
}

impl GraphVars {
    pub fn record<T: Scalar>(
        tape: &mut Tape<T>,
        graphs: &[Tensor<T>; GRAPH_COUNT],
        per_graph: bool,
    ) -> Self {
        if per_graph {
            GraphVars::Separate(graphs.clone().map(|g| tape.constant(g)))
        } else {
            let mut sum = graphs[0].clone();
            for g in &graphs[1..] {
                for (s, v) in sum.data_mut().iter_mut().zip(g.data()) {
                    *s += *v;
                }
            }
            GraphVars::Summed(tape.constant(sum))
        }
    }
}

/// Propagates then transforms, or the reverse, whichever multiplies the
/// N × N operator against the narrower matrix.
fn propagate<T: Scalar>(tape: &mut Tape<T>, a: Var, h: Var, w: Var) -> Result<Var> {
    let (win, wout) = {
        let s = tape.shape(w);
        (s[0], s[1])
    };
    if win <= wout {
        let ah = tape.matmul(a, h)?;
        tape.matmul(ah, w)
    } else {
        let hw = tape.matmul(h, w)?;
        tape.matmul(a, hw)
    }
}

/// Tape-recorded layer. `weights` holds one shared matrix or one per graph.
pub fn conv_layer_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    graphs: &GraphVars,
    weights: &[Var],
) -> Result<Var> {
    let pre = match (graphs, weights) {
        (GraphVars::Summed(a), [w]) => propagate(tape, *a, h, *w)?,
        (GraphVars::Separate(gs), ws) if ws.len() == GRAPH_COUNT => {
            let mut acc = propagate(tape, gs[0], h, ws[0])?;
            for g in 1..GRAPH_COUNT {
                let term = propagate(tape, gs[g], h, ws[g])?;
                acc = tape.add(acc, term)?;
            }
            acc
        }
        (GraphVars::Separate(gs), [w]) => {
            let mut acc = propagate(tape, gs[0], h, *w)?;
            for &a in &gs[1..] {
                let term = propagate(tape, a, h, *w)?;
                acc = tape.add(acc, term)?;
            }
            acc
        }
        _ => {
            return Err(Error::Invalid(format!(
                "{} layer weights do not match the graph layout",
                weights.len()
            )))
        }
    };
    Ok(tape.relu(pre))
}

pub fn encode_network_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    h0: Var,
    graphs: &GraphVars,
    layers: &[Vec<Var>],
) -> Result<Var> {
    layers
        .iter()
        .try_fold(h0, |h, ws| conv_layer_on_tape(tape, h, graphs, ws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{central_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
        let mut a = Tensor::identity(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.random_range(0.0..1.0);
                a.set(i, j, v);
                a.set(j, i, v);
            }
        }
        crate::graph::graph_function(&a).unwrap()
    }

    fn graphs(rng: &mut ChaCha8Rng, n: usize) -> [Tensor<f64>; 3] {
        std::array::from_fn(|_| random_graph(rng, n))
    }

    /// Scalar triple loop over graphs, neighbors and feature pairs.
    fn brute_layer(h: &Tensor<f64>, gs: &[Tensor<f64>; 3], ws: &[Tensor<f64>]) -> Tensor<f64> {
        let (n, fin) = (h.rows(), h.cols());
        let fout = ws[0].cols();
        let mut out = Tensor::zeros(&[n, fout]);
        for i in 0..n {
            for o in 0..fout {
                let mut acc = 0.0;
                for (g, a) in gs.iter().enumerate() {
                    let w = &ws[if ws.len() == 3 { g } else { 0 }];
                    for j in 0..n {
                        for k in 0..fin {
                            acc += a.get(i, j) * h.get(j, k) * w.get(k, o);
                        }
                    }
                }
                out.set(i, o, acc.max(0.0));
            }
        }
        out
    }

    #[test]
    fn identity_graphs_triple_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap();
        let eye = Tensor::<f64>::identity(4);
        let layer = GcnLayerParameters::shared(Tensor::identity(3));
        let out = multigraph_conv_layer(&h, &[eye.clone(), eye.clone(), eye], &layer).unwrap();
        for (o, x) in out.data().iter().zip(h.data()) {
            assert!((o - 3.0 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gs = graphs(&mut rng, 5);
        let layer = GcnLayerParameters::init(3, 4, false, &mut rng);
        let out = multigraph_conv_layer(&Tensor::zeros(&[5, 3]), &gs, &layer).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_graph_size_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gs = graphs(&mut rng, 4);
        gs[2] = Tensor::identity(5);
        let layer = GcnLayerParameters::init(3, 4, false, &mut rng);
        assert!(multigraph_conv_layer(&random(&mut rng, 4, 3), &gs, &layer).is_err());
    }

    #[test]
    fn layer_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for per_graph in [false, true] {
            for _ in 0..5 {
                let gs = graphs(&mut rng, 5);
                let h = random(&mut rng, 5, 4);
                let layer = GcnLayerParameters::init(4, 6, per_graph, &mut rng);
                let got = multigraph_conv_layer(&h, &gs, &layer).unwrap();
                let want = brute_layer(&h, &gs, &layer.weights);
                assert!(got.max_abs_diff(&want) < 1e-10);
            }
        }
    }

    #[test]
    fn composition_base_cases_and_two_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gs = graphs(&mut rng, 4);
        let h0 = random(&mut rng, 4, 3);
        assert_eq!(encode_network(&h0, &gs, &[]).unwrap(), h0);
        let l1 = GcnLayerParameters::init(3, 5, false, &mut rng);
        let l2 = GcnLayerParameters::init(5, 2, false, &mut rng);
        assert_eq!(
            encode_network(&h0, &gs, std::slice::from_ref(&l1)).unwrap(),
            multigraph_conv_layer(&h0, &gs, &l1).unwrap()
        );
        let got = encode_network(&h0, &gs, &[l1.clone(), l2.clone()]).unwrap();
        let want = brute_layer(&brute_layer(&h0, &gs, &l1.weights), &gs, &l2.weights);
        assert!(got.max_abs_diff(&want) < 1e-10);
    }

    fn tape_forward(
        h0: &Tensor<f64>,
        gs: &[Tensor<f64>; 3],
        layers: &[GcnLayerParameters<f64>],
        per_graph: bool,
    ) -> Tensor<f64> {
        let mut tape = Tape::new();
        let h = tape.constant(h0.clone());
        let g = GraphVars::record(&mut tape, gs, per_graph);
        let ws: Vec<Vec<Var>> = layers
            .iter()
            .map(|l| l.weights.iter().map(|w| tape.var(w.clone())).collect())
            .collect();
        let out = encode_network_on_tape(&mut tape, h, &g, &ws).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn tape_encoder_matches_plain_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for per_graph in [false, true] {
            let gs = graphs(&mut rng, 6);
            let h0 = random(&mut rng, 6, 7);
            let layers = [
                GcnLayerParameters::init(7, 9, per_graph, &mut rng),
                GcnLayerParameters::init(9, 4, per_graph, &mut rng),
            ];
            let plain = encode_network(&h0, &gs, &layers).unwrap();
            let taped = tape_forward(&h0, &gs, &layers, per_graph);
            assert!(plain.max_abs_diff(&taped) < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 8;
        let gs = graphs(&mut rng, n);
        let h0 = random(&mut rng, n, 5);
        let layers = [
            GcnLayerParameters::init(5, 6, false, &mut rng),
            GcnLayerParameters::init(6, 3, false, &mut rng),
        ];
        let perm = [5, 2, 7, 0, 1, 6, 3, 4];
        let lhs = encode_network(&h0, &gs, &layers).unwrap().permute_rows(&perm);
        let pgs = gs.clone().map(|g| g.permute_symmetric(&perm));
        let rhs = encode_network(&h0.permute_rows(&perm), &pgs, &layers).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn two_layer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gs = graphs(&mut rng, 4);
        let h0 = random(&mut rng, 4, 3);
        let layers = vec![
            GcnLayerParameters::init(3, 5, false, &mut rng),
            GcnLayerParameters::init(5, 2, false, &mut rng),
        ];
        let loss = |w0: &[f64]| -> f64 {
            let mut l = layers.clone();
            l[0].weights[0].data_mut().copy_from_slice(w0);
            encode_network(&h0, &gs, &l).unwrap().data().iter().map(|v| v * v).sum()
        };
        let mut tape = Tape::new();
        let h = tape.var(h0.clone().with_grad());
        let g = GraphVars::record(&mut tape, &gs, false);
        let ws: Vec<Vec<Var>> = layers
            .iter()
            .map(|l| vec![tape.var(l.weights[0].clone().with_grad())])
            .collect();
        let out = encode_network_on_tape(&mut tape, h, &g, &ws).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let total = tape.sum(sq);
        tape.backward(total).unwrap();
        let analytic = tape.grad(ws[0][0]).unwrap().to_vec();
        let numeric = central_difference(loss, layers[0].weights[0].data(), 1e-5);
        assert!(relative_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn output_is_finite_for_large_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gs = graphs(&mut rng, 5);
        let h0 = Tensor::full(&[5, 3], 1e150);
        let layers = [GcnLayerParameters::init(3, 3, false, &mut rng)];
        assert!(encode_network(&h0, &gs, &layers).unwrap().is_finite());
    }
}
