//! Full model forward pass recorded on a differentiation tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::moe::params::{ExpertParams, ModelParams, ParamRole, RouterParams};
use crate::moe::routing::{select_top_k, select_top_p};
use crate::moe::ExpertKind;
use crate::numerics::{BatchStats, Matrix, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batch statistics used for normalization.
    Train,
    /// Dropout off, running statistics used for normalization.
    Eval,
}

/// Per-node expert selection policy.
#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    /// Minimal descending prefix reaching each node's threshold.
    TopP(&'a [f64]),
    /// Fixed number of highest-scoring experts.
    TopK(usize),
}

/// Routing decisions of one layer.
#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    /// Router distribution π (N x K).
    pub probs: Matrix<T>,
    /// Selected experts per node, in descending-score order.
    pub selected: Vec<Vec<usize>>,
    /// Renormalized weights π̄ (N x K), zero outside the selection.
    pub weights: Matrix<T>,
}

impl<T: Scalar> LayerTrace<T> {
    pub fn active_counts(&self) -> Vec<usize> {
        self.selected.iter().map(Vec::len).collect()
    }

    /// Fraction of nodes that selected each expert.
    pub fn selection_frequency(&self) -> Vec<f64> {
        let k = self.probs.cols();
        let mut freq = vec![0.0; k];
        for sel in &self.selected {
            for &i in sel {
                freq[i] += 1.0;
            }
        }
        let n = self.selected.len().max(1) as f64;
        freq.iter_mut().for_each(|f| *f /= n);
        freq
    }

    /// Selection mask in row-major N x K order.
    pub fn mask(&self) -> Vec<bool> {
        let k = self.probs.cols();
        let mut mask = vec![false; self.selected.len() * k];
        for (v, sel) in self.selected.iter().enumerate() {
            for &i in sel {
                mask[v * k + i] = true;
            }
        }
        mask
    }
}

#[derive(Clone, Debug)]
pub struct RoutingTrace<T> {
    pub layers: Vec<LayerTrace<T>>,
}

impl<T: Scalar> RoutingTrace<T> {
    /// Activated experts per node, averaged over layers.
    pub fn active_per_node(&self) -> Vec<f64> {
        let n = self.layers.first().map_or(0, |l| l.selected.len());
        let mut out = vec![0.0; n];
        for layer in &self.layers {
            for (o, c) in out.iter_mut().zip(layer.active_counts()) {
                *o += c as f64;
            }
        }
        let l = self.layers.len().max(1) as f64;
        out.iter_mut().for_each(|o| *o /= l);
        out
    }

    pub fn mean_active_experts(&self) -> f64 {
        let per_node = self.active_per_node();
        per_node.iter().sum::<f64>() / per_node.len().max(1) as f64
    }

    /// Per-expert selection frequency averaged over layers.
    pub fn per_expert_load(&self) -> Vec<f64> {
        let k = self.layers.first().map_or(0, |l| l.probs.cols());
        let mut out = vec![0.0; k];
        for layer in &self.layers {
            for (o, f) in out.iter_mut().zip(layer.selection_frequency()) {
                *o += f;
            }
        }
        let l = self.layers.len().max(1) as f64;
        out.iter_mut().for_each(|o| *o /= l);
        out
    }
}

/// A recorded forward pass.
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    /// Tape handle of every model tensor, in [`ModelParams::tensors`] order.
    pub params: Vec<Var>,
    /// Class probabilities (N x C).
    pub probs: Var,
    /// Router distributions π per layer.
    pub router_probs: Vec<Var>,
    pub trace: RoutingTrace<T>,
    /// Batch statistics per layer (train mode with normalization only).
    pub batch_stats: Vec<Option<BatchStats<T>>>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn probs(&self) -> &Matrix<T> {
        self.tape.value(self.probs)
    }
}

fn router_on_tape<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], router: &RouterParams, h: Var) -> Result<Var> {
    let a = tape.matmul(h, vars[router.w1.index()])?;
    let a = tape.add_row(a, vars[router.b1.index()])?;
    let a = tape.relu(a)?;
    let s = tape.matmul(a, vars[router.w2.index()])?;
    let s = tape.add_row(s, vars[router.b2.index()])?;
    tape.softmax_rows(s)
}

fn expert_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    kind: ExpertKind,
    weights: &[Var],
    biases: &[Var],
    h: Var,
    graph: &Graph<T>,
) -> Result<Var> {
    let expect = |w: usize, b: usize| {
        if weights.len() != w || biases.len() != b {
            Err(Error::shape(
                "expert_forward",
                format!("{kind:?} takes {w} weights and {b} biases, got {} and {}", weights.len(), biases.len()),
            ))
        } else {
            Ok(())
        }
    };
    match kind {
        ExpertKind::GcnOneHop => {
            expect(1, 1)?;
            let xw = tape.matmul(h, weights[0])?;
            let agg = tape.spmm(graph.adjacency(), xw)?;
            tape.add_row(agg, biases[0])
        }
        ExpertKind::GcnTwoHop => {
            expect(2, 2)?;
            let xw = tape.matmul(h, weights[0])?;
            let agg = tape.spmm(graph.adjacency(), xw)?;
            let inner = tape.add_row(agg, biases[0])?;
            let inner = tape.relu(inner)?;
            let xw = tape.matmul(inner, weights[1])?;
            let agg = tape.spmm(graph.adjacency(), xw)?;
            tape.add_row(agg, biases[1])
        }
        ExpertKind::SageMeanOneHop => {
            expect(2, 1)?;
            let own = tape.matmul(h, weights[0])?;
            let nbr = tape.spmm(graph.mean_adjacency(), h)?;
            let nbr = tape.matmul(nbr, weights[1])?;
            let sum = tape.add(own, nbr)?;
            tape.add_row(sum, biases[0])
        }
    }
}

/// Router distribution `softmax(W_2 ReLU(W_1 h + b_1) + b_2)` of one layer.
pub fn route_scores<T: Scalar>(params: &ModelParams<T>, layer: usize, h: &Matrix<T>) -> Result<Matrix<T>> {
    let router = &params
        .layers
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?
        .router;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors().iter().map(|p| tape.constant(p.value.clone())).collect();
    let hv = tape.constant(h.clone());
    let out = router_on_tape(&mut tape, &vars, router, hv)?;
    Ok(tape.value(out).clone())
}

/// Output of a single expert for node embeddings `h`.
pub fn expert_forward<T: Scalar>(
    kind: ExpertKind,
    weights: &[Matrix<T>],
    biases: &[Matrix<T>],
    h: &Matrix<T>,
    graph: &Graph<T>,
) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let w: Vec<Var> = weights.iter().map(|m| tape.constant(m.clone())).collect();
    let b: Vec<Var> = biases.iter().map(|m| tape.constant(m.clone())).collect();
    let hv = tape.constant(h.clone());
    let out = expert_on_tape(&mut tape, kind, &w, &b, hv, graph)?;
    Ok(tape.value(out).clone())
}

fn expert_vars(vars: &[Var], expert: &ExpertParams) -> (Vec<Var>, Vec<Var>) {
    (
        expert.weights.iter().map(|id| vars[id.index()]).collect(),
        expert.biases.iter().map(|id| vars[id.index()]).collect(),
    )
}

/// Runs the model on `graph`.
///
/// `H⁰ = Dropout(ReLU(XW₀ + b₀))`; each layer computes every expert, routes,
/// selects per node, fuses `H + Σ π̄ Z` and applies Norm → ReLU → Dropout;
/// the head produces row-softmax class probabilities. `rng` drives dropout
/// and is untouched in eval mode or when the dropout rate is zero.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    graph: &Graph<T>,
    selection: Selection<'_>,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardPass<T>> {
    let config = params.config();
    let n = graph.num_nodes();
    if graph.num_features() != config.in_dim {
        return Err(Error::shape(
            "forward",
            format!("graph has {} features, model expects {}", graph.num_features(), config.in_dim),
        ));
    }
    if graph.num_classes() > config.classes {
        return Err(Error::shape(
            "forward",
            format!("graph has {} classes, model predicts {}", graph.num_classes(), config.classes),
        ));
    }
    if let Selection::TopP(th) = selection {
        if th.len() != n {
            return Err(Error::shape("forward", format!("{} thresholds for {n} nodes", th.len())));
        }
    }
    let keep = config.keep_probability();
    let train = mode == Mode::Train;

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .tensors()
        .iter()
        .map(|p| {
            if p.role == ParamRole::Buffer {
                tape.constant(p.value.clone())
            } else {
                tape.leaf(p.value.clone())
            }
        })
        .collect();

    let x = tape.constant(graph.features().clone());
    let h = tape.matmul(x, vars[params.embed.weight.index()])?;
    let h = tape.add_row(h, vars[params.embed.bias.index()])?;
    let h = tape.relu(h)?;
    let mut h = if train { tape.dropout(h, keep, rng)? } else { h };

    let mut router_probs = Vec::with_capacity(params.layers.len());
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut batch_stats = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let mut outputs = Vec::with_capacity(layer.experts.len());
        for expert in &layer.experts {
            let (w, b) = expert_vars(&vars, expert);
            outputs.push(expert_on_tape(&mut tape, expert.kind, &w, &b, h, graph)?);
        }
        let pi = router_on_tape(&mut tape, &vars, &layer.router, h)?;
        let pi_value = tape.value(pi).clone();
        let selected: Vec<Vec<usize>> = pi_value
            .row_iter()
            .enumerate()
            .map(|(v, row)| {
                let scores: Vec<f64> = row.iter().map(|s| s.as_f64()).collect();
                match selection {
                    Selection::TopP(th) => select_top_p(&scores, th[v]),
                    Selection::TopK(k) => select_top_k(&scores, k),
                }
            })
            .collect();
        let mut trace = LayerTrace {
            probs: pi_value,
            selected,
            weights: Matrix::zeros(0, 0),
        };
        let weights = tape.masked_renorm(pi, trace.mask())?;
        trace.weights = tape.value(weights).clone();
        let fused = tape.mix(weights, &outputs)?;
        let mut next = tape.add(h, fused)?;
        match &layer.norm {
            Some(norm) if train => {
                let (out, stats) = tape.batch_norm(next, vars[norm.scale.index()], vars[norm.shift.index()])?;
                next = out;
                batch_stats.push(Some(stats));
            }
            Some(norm) => {
                next = tape.batch_norm_frozen(
                    next,
                    vars[norm.scale.index()],
                    vars[norm.shift.index()],
                    params.get(norm.running_mean),
                    params.get(norm.running_var),
                )?;
                batch_stats.push(None);
            }
            None => batch_stats.push(None),
        }
        next = tape.relu(next)?;
        h = if train { tape.dropout(next, keep, rng)? } else { next };
        router_probs.push(pi);
        layers.push(trace);
    }

    let logits = tape.matmul(h, vars[params.head.weight.index()])?;
    let logits = tape.add_row(logits, vars[params.head.bias.index()])?;
    let probs = tape.softmax_rows(logits)?;
    Ok(ForwardPass {
        tape,
        params: vars,
        probs,
        router_probs,
        trace: RoutingTrace { layers },
        batch_stats,
    })
}

impl<T: Scalar> ModelParams<T> {
    /// `running ← momentum · running + (1 − momentum) · batch`.
    pub fn update_running_stats(&mut self, stats: &[Option<BatchStats<T>>], momentum: f64) -> Result<()> {
        let m = T::from_f64_lossy(momentum);
        let one_minus = T::one() - m;
        let pairs: Vec<_> = self
            .layers
            .iter()
            .zip(stats)
            .filter_map(|(layer, s)| Some((layer.norm.clone()?, s.as_ref()?.clone())))
            .collect();
        for (norm, s) in pairs {
            let mean = self.get(norm.running_mean).scale(m);
            let mean = mean.add(&s.mean.scale(one_minus))?;
            self.set(norm.running_mean, mean)?;
            let var = self.get(norm.running_var).scale(m);
            let var = var.add(&s.var.scale(one_minus))?;
            self.set(norm.running_var, var)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, SbmSpec};
    use crate::moe::{Backbone, ExpertLayout, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph(n: usize) -> Graph<f64> {
        generate_sbm(&SbmSpec {
            n,
            classes: 3,
            feature_dim: 5,
            p_in: 0.3,
            p_out: 0.05,
            signal: 1.5,
            seed: 2,
        })
        .unwrap()
    }

    fn config(layout: ExpertLayout, backbone: Backbone, batch_norm: bool) -> ModelConfig {
        ModelConfig {
            in_dim: 5,
            hidden: 8,
            classes: 3,
            experts: 4,
            layers: 2,
            dropout: 0.5,
            gamma: 5.0,
            batch_norm,
            layout,
            backbone,
        }
    }

    fn relu(m: &Matrix<f64>) -> Matrix<f64> {
        m.map(|v| v.max(0.0))
    }

    #[test]
    fn full_thresholds_select_every_expert() {
        let g = graph(20);
        let p = ModelParams::init(&config(ExpertLayout::HalfHalf, Backbone::Gcn, true), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let th = vec![1.0; 20];
        let pass = forward(&p, &g, Selection::TopP(&th), Mode::Train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for layer in &pass.trace.layers {
            assert!(layer.selected.iter().all(|s| s.len() == 4));
        }
        for row in pass.probs().row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(pass.trace.mean_active_experts(), 4.0);
        assert_eq!(pass.trace.per_expert_load(), vec![1.0; 4]);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let g = graph(25).cast::<f32>();
        let p = ModelParams::<f32>::init(&config(ExpertLayout::AllOneHop, Backbone::Sage, true), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let th: Vec<f64> = (0..25).map(|i| 0.3 + 0.02 * i as f64).collect();
        let a = forward(&p, &g, Selection::TopP(&th), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = forward(&p, &g, Selection::TopP(&th), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a.probs(), b.probs());
    }

    #[test]
    fn renormalized_weights_are_valid_mixtures() {
        let g = graph(30);
        let p = ModelParams::init(&config(ExpertLayout::HalfHalf, Backbone::Gcn, false), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let th: Vec<f64> = (0..30).map(|i| (i as f64 + 1.0) / 30.0).collect();
        let pass = forward(&p, &g, Selection::TopP(&th), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for layer in &pass.trace.layers {
            let mask = layer.mask();
            for v in 0..30 {
                let row = layer.weights.row(v);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for (i, &w) in row.iter().enumerate() {
                    if !mask[v * 4 + i] {
                        assert_eq!(w, 0.0);
                    }
                }
                assert!(!layer.selected[v].is_empty());
            }
        }
    }

    #[test]
    fn full_activation_equals_dense_mixture() {
        let g = graph(18);
        let cfg = config(ExpertLayout::HalfHalf, Backbone::Gcn, false);
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let th = vec![1.0; 18];
        let pass = forward(&p, &g, Selection::TopP(&th), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

        // value-level reference: every expert weighted by raw π
        let mut h = relu(
            &g.features()
                .matmul(p.get(p.embed.weight))
                .unwrap()
                .add_row_vector(p.get(p.embed.bias))
                .unwrap(),
        );
        for (l, layer) in p.layers.iter().enumerate() {
            let pi = route_scores(&p, l, &h).unwrap();
            let mut fused = h.clone();
            for (k, e) in layer.experts.iter().enumerate() {
                let w: Vec<_> = e.weights.iter().map(|&id| p.get(id).clone()).collect();
                let b: Vec<_> = e.biases.iter().map(|&id| p.get(id).clone()).collect();
                let z = expert_forward(e.kind, &w, &b, &h, &g).unwrap();
                for v in 0..18 {
                    let weight = pi.get(v, k);
                    for (o, &zv) in fused.row_mut(v).iter_mut().zip(z.row(v)) {
                        *o += weight * zv;
                    }
                }
            }
            h = relu(&fused);
        }
        let logits = h
            .matmul(p.get(p.head.weight))
            .unwrap()
            .add_row_vector(p.get(p.head.bias))
            .unwrap();
        let expected = crate::numerics::softmax_rows(&logits);
        assert!(pass.probs().max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn zero_router_is_uniform() {
        let cfg = config(ExpertLayout::AllOneHop, Backbone::Gcn, false);
        let p = ModelParams::<f64>::zeros(&cfg).unwrap();
        let h = Matrix::from_fn(6, 8, |i, j| (i * j) as f64 - 3.0);
        let pi = route_scores(&p, 0, &h).unwrap();
        for &v in pi.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert!(route_scores(&p, 7, &h).is_err());
    }

    #[test]
    fn expert_reference_cases() {
        // no edges: Â = I
        let isolated = Graph::new(&[], Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64), vec![0, 1, 0], None).unwrap();
        let h = isolated.features().clone();
        let id = Matrix::identity(2);
        let zero = Matrix::zeros(1, 2);
        let out = expert_forward(ExpertKind::GcnOneHop, &[id.clone()], &[zero.clone()], &h, &isolated).unwrap();
        assert_eq!(out, h);

        // SAGE on isolated nodes: self term plus own mean
        let ws = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        let wn = Matrix::from_rows(&[[0.5, 0.0], [1.0, -1.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.1, 0.2]]).unwrap();
        let out = expert_forward(ExpertKind::SageMeanOneHop, &[ws.clone(), wn.clone()], &[b.clone()], &h, &isolated).unwrap();
        let expected = h.matmul(&ws).unwrap().add(&h.matmul(&wn).unwrap()).unwrap().add_row_vector(&b).unwrap();
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-12);

        // 4-cycle is 2-regular: constant features stay constant across rows
        let cycle = Graph::new(&[(0, 1), (1, 2), (2, 3), (3, 0)], Matrix::filled(4, 2, 0.7), vec![0, 0, 1, 1], None).unwrap();
        let w = Matrix::from_rows(&[[0.3, -1.0], [2.0, 0.5]]).unwrap();
        let out = expert_forward(ExpertKind::GcnOneHop, &[w.clone()], &[zero.clone()], cycle.features(), &cycle).unwrap();
        let dense = cycle.adjacency().to_dense().matmul(&cycle.features().matmul(&w).unwrap()).unwrap();
        assert!(out.max_abs_diff(&dense).unwrap() < 1e-12);
        for r in 1..4 {
            for c in 0..2 {
                assert!((out.get(r, c) - out.get(0, c)).abs() < 1e-6);
            }
        }

        assert!(expert_forward(ExpertKind::GcnTwoHop, &[id], &[zero], &h, &isolated).is_err());
    }

    #[test]
    fn top_k_selection_is_fixed_width() {
        let g = graph(12);
        let p = ModelParams::init(&config(ExpertLayout::AllOneHop, Backbone::Gcn, false), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let pass = forward(&p, &g, Selection::TopK(2), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(pass.trace.layers.iter().all(|l| l.active_counts().iter().all(|&c| c == 2)));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let g = graph(10);
        let p = ModelParams::init(&config(ExpertLayout::AllOneHop, Backbone::Gcn, false), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let th = vec![1.0; 9];
        assert!(forward(&p, &g, Selection::TopP(&th), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let mut cfg = config(ExpertLayout::AllOneHop, Backbone::Gcn, false);
        cfg.in_dim = 4;
        let p = ModelParams::<f64>::zeros(&cfg).unwrap();
        assert!(forward(&p, &g, Selection::TopK(1), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
