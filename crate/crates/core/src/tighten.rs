//! Layerwise polytope propagation of neuron bounds.
//!
//! For each hidden layer the postactivations are enclosed in a polytope
//! whose facets come from the reachability SDP on the network prefix.
//! Linear programs over that polytope bound the next layer's
//! preactivations, which are intersected with the current intervals before
//! moving on.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conic::{self, ConeKind, ConeProgram, LinExpr, SolveStatus, ToleranceProfile};
use crate::error::{Error, Result};
use crate::network::{group_blocks, interval_propagate, interval_propagate_refined, prune_stable, BoundsState, InputBox, Network};
use crate::reach::{assemble_lmi, solve_facet_bound, ActivationSpec, InputSetQC, LiftedBasis};
use crate::relation::Interval;

const DEDUP_COS: f64 = 1.0 - 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TightenOptions {
    /// Right-singular directions of the next weight matrix, clamped to its
    /// rank dimension.
    pub svd_count: usize,
    /// Adds all `+-e_i +-e_j`.
    pub pairwise: bool,
    /// Repeated-ReLU blocks of this size inside the facet SDPs.
    pub repeated_s_max: Option<usize>,
}

impl Default for TightenOptions {
    fn default() -> Self {
        Self {
            svd_count: 25,
            pairwise: false,
            repeated_s_max: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FacetSource {
    Basis,
    Svd,
    Pairwise,
}

/// Facet normals for an `n`-dimensional layer whose outgoing weights are
/// `next` (`m x n`).
pub fn facet_directions(n: usize, next: &DMatrix<f64>, opts: &TightenOptions) -> Vec<(Vec<f64>, FacetSource)> {
    let mut out: Vec<(Vec<f64>, FacetSource)> = Vec::new();
    let push = |v: Vec<f64>, src: FacetSource, out: &mut Vec<(Vec<f64>, FacetSource)>| {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return;
        }
        let dup = out.iter().any(|(u, _)| {
            let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (nu * norm) > DEDUP_COS
        });
        if !dup {
            out.push((v, src));
        }
    };
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut v = vec![0.0; n];
            v[i] = s;
            push(v, FacetSource::Basis, &mut out);
        }
    }
    let t = opts.svd_count.min(next.nrows()).min(n);
    if t > 0 && next.ncols() == n {
        let svd = next.clone().svd(false, true);
        let vt = svd.v_t.expect("requested right singular vectors");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
        for &k in order.iter().take(t) {
            let v: Vec<f64> = vt.row(k).iter().copied().collect();
            push(v.clone(), FacetSource::Svd, &mut out);
            push(v.iter().map(|a| -a).collect(), FacetSource::Svd, &mut out);
        }
    }
    if opts.pairwise {
        for i in 0..n {
            for j in i + 1..n {
                for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    let mut v = vec![0.0; n];
                    v[i] = si;
                    v[j] = sj;
                    push(v, FacetSource::Pairwise, &mut out);
                }
            }
        }
    }
    out
}

/// `{theta : A theta <= b}` over the kept neurons of one hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPolytope {
    pub layer: usize,
    /// Original indices of the coordinates.
    pub kept: Vec<usize>,
    pub normals: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
    pub sources: Vec<FacetSource>,
    /// Directions whose SDP failed.
    pub failed: usize,
}

impl LayerPolytope {
    pub fn contains(&self, theta: &[f64], tol: f64) -> bool {
        self.normals
            .iter()
            .zip(&self.offsets)
            .all(|(a, b)| a.iter().zip(theta).map(|(u, v)| u * v).sum::<f64>() <= b + tol)
    }
}

fn box_support(a: &[f64], boxes: &[Interval]) -> f64 {
    a.iter().zip(boxes).map(|(ai, iv)| (ai * iv.lo).max(ai * iv.hi)).sum()
}

/// Bounding polytope of the postactivations of hidden layer `l`, using
/// exact scalar ReLU constraints and local bounds. Offsets are clipped to
/// the support of the current interval box.
pub fn layer_polytope(
    net: &Network,
    input: &InputBox,
    bounds: &BoundsState,
    l: usize,
    opts: &TightenOptions,
    tol: &ToleranceProfile,
) -> Result<LayerPolytope> {
    if l >= net.depth() {
        return Err(Error::Precondition(format!("layer {l} out of range")));
    }
    let pruned = prune_stable(net, bounds)?;
    let kept = pruned.kept[l].clone();
    let n = kept.len();
    let post: Vec<Interval> = kept.iter().map(|&i| bounds.layers[l][i].post).collect();
    let (w_next, _) = net.next_affine(l);
    let w_kept = w_next.select_columns(&kept);
    let dirs = facet_directions(n, &w_kept, opts);
    let mut poly = LayerPolytope {
        layer: l,
        kept,
        normals: vec![],
        offsets: vec![],
        sources: vec![],
        failed: 0,
    };
    if n == 0 {
        return Ok(poly);
    }
    let sub = pruned.net.prefix(l);
    let sub_bounds = {
        let r = pruned.restrict(bounds);
        BoundsState {
            layers: r.layers[..=l].to_vec(),
            output: post.clone(),
        }
    };
    let mut act = ActivationSpec::ep();
    if let Some(s) = opts.repeated_s_max {
        act.repeated = Some(group_blocks(&sub, &sub_bounds, s, crate::network::BlockStrategy::Sequential)?);
    }
    let lifted = LiftedBasis::new(&sub);
    let lmi = assemble_lmi(&sub, &lifted, &InputSetQC::from_box(input), &act, Some(&sub_bounds))?;
    let results = dirs
        .par_iter()
        .map(|(a, _)| solve_facet_bound(&lmi, a, tol))
        .collect::<Result<Vec<_>>>()?;
    for ((a, src), r) in dirs.into_iter().zip(results) {
        let support = box_support(&a, &post);
        let b = match r.bound {
            Some(b) => b.min(support),
            None => {
                poly.failed += 1;
                support
            }
        };
        poly.normals.push(a);
        poly.offsets.push(b);
        poly.sources.push(src);
    }
    Ok(poly)
}

/// Range of `w_i^T theta + b_i` over the polytope for every row `i`.
pub fn lp_preactivation_bounds(poly: &LayerPolytope, w: &DMatrix<f64>, bias: &DVector<f64>, tol: &ToleranceProfile) -> Result<Vec<Interval>> {
    let n = poly.kept.len();
    if w.ncols() != n || w.nrows() != bias.len() {
        return Err(Error::Precondition("weights do not match the polytope".into()));
    }
    if n == 0 {
        return Ok(bias.iter().map(|b| Interval::new(*b, *b)).collect());
    }
    let mut base = ConeProgram::new();
    let theta = base.add_block("theta", ConeKind::Free, n);
    for (a, b) in poly.normals.iter().zip(&poly.offsets) {
        let mut e = LinExpr::constant(*b);
        for (k, ak) in a.iter().enumerate() {
            e.add_term(theta.var(k), -ak);
        }
        base.add_geq(e);
    }
    (0..w.nrows())
        .into_par_iter()
        .map(|i| {
            let mut ends = [0.0; 2];
            for (k, s) in [1.0, -1.0].into_iter().enumerate() {
                let mut p = base.clone();
                let mut obj = LinExpr::constant(0.0);
                for j in 0..n {
                    obj.add_term(theta.var(j), s * w[(i, j)]);
                }
                p.minimize(obj);
                let out = conic::solve(&p, tol)?;
                match out.status {
                    SolveStatus::Optimal | SolveStatus::Inaccurate => ends[k] = s * out.objective + bias[i],
                    SolveStatus::Infeasible => {
                        return Err(Error::Inconsistent(format!("layer {} polytope is empty", poly.layer)));
                    }
                    _ => out.require_optimal("preactivation LP")?,
                }
            }
            Ok(Interval::new(ends[0], ends[1].max(ends[0])))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Tightened {
    pub ibp: BoundsState,
    pub bounds: BoundsState,
    pub polytopes: Vec<LayerPolytope>,
}

/// One sequential sweep: the polytope of layer `l` refines layer `l + 1`,
/// and stability and pruning are recomputed before the next layer.
pub fn tighten_network(net: &Network, input: &InputBox, opts: &TightenOptions, tol: &ToleranceProfile) -> Result<Tightened> {
    let ibp = interval_propagate(net, input)?;
    let mut bounds = ibp.clone();
    let mut refined: Vec<Vec<Interval>> = vec![bounds.layers[0].iter().map(|b| b.pre).collect()];
    let mut polytopes = Vec::new();
    for l in 0..net.depth().saturating_sub(1) {
        let poly = layer_polytope(net, input, &bounds, l, opts, tol)?;
        let (w, b) = net.next_affine(l);
        let lp = lp_preactivation_bounds(&poly, &w.select_columns(&poly.kept), b, tol)?;
        polytopes.push(poly);
        refined.push(lp);
        bounds = interval_propagate_refined(net, input, &refined)?;
        refined[l + 1] = bounds.layers[l + 1].iter().map(|b| b.pre).collect();
    }
    Ok(Tightened { ibp, bounds, polytopes })
}

/// IBP and tightened preactivation intervals of one neuron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronTightening {
    pub layer: usize,
    pub index: usize,
    pub ibp: Interval,
    pub tightened: Interval,
    /// Percent width reduction; zero for degenerate intervals.
    pub reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub mean_reduction: f64,
    pub facets: usize,
    pub failed_facets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightenReport {
    pub neurons: Vec<NeuronTightening>,
    pub layers: Vec<LayerSummary>,
}

impl TightenReport {
    pub fn new(t: &Tightened) -> Self {
        let mut neurons = Vec::new();
        let mut layers = Vec::new();
        for (l, (ib, tb)) in t.ibp.layers.iter().zip(&t.bounds.layers).enumerate() {
            let mut sum = 0.0;
            for (i, (a, b)) in ib.iter().zip(tb).enumerate() {
                let (w0, w1) = (a.pre.width(), b.pre.width());
                let reduction = if w0 > 0.0 { 100.0 * (1.0 - w1 / w0) } else { 0.0 };
                sum += reduction;
                neurons.push(NeuronTightening {
                    layer: l,
                    index: i,
                    ibp: a.pre,
                    tightened: b.pre,
                    reduction,
                });
            }
            // the polytope of layer l - 1 refines layer l
            let poly = l.checked_sub(1).and_then(|k| t.polytopes.get(k));
            layers.push(LayerSummary {
                layer: l,
                mean_reduction: if ib.is_empty() { 0.0 } else { sum / ib.len() as f64 },
                facets: poly.map_or(0, |p| p.normals.len()),
                failed_facets: poly.map_or(0, |p| p.failed),
            });
        }
        Self { neurons, layers }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, Layer};

    fn tol() -> ToleranceProfile {
        ToleranceProfile::default()
    }

    fn anticorrelated() -> Network {
        let w1 = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let w2 = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        Network::new(
            1,
            vec![
                Layer::new(w1, DVector::zeros(2), Activation::Relu),
                Layer::new(w2, DVector::from_element(1, -0.5), Activation::Relu),
            ],
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
        )
        .unwrap()
    }

    fn poly(normals: Vec<Vec<f64>>, offsets: Vec<f64>) -> LayerPolytope {
        let n = normals[0].len();
        LayerPolytope {
            layer: 0,
            kept: (0..n).collect(),
            sources: vec![FacetSource::Basis; normals.len()],
            normals,
            offsets,
            failed: 0,
        }
    }

    #[test]
    fn direction_counts() {
        let w = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let basis = TightenOptions {
            svd_count: 0,
            ..TightenOptions::default()
        };
        let d = facet_directions(2, &w, &basis);
        assert_eq!(d.iter().map(|x| x.0.clone()).collect::<Vec<_>>(), vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
        let pw = TightenOptions { pairwise: true, ..basis };
        assert_eq!(facet_directions(2, &w, &pw).len(), 8);
        // the only singular direction duplicates e_1
        assert_eq!(facet_directions(2, &w, &TightenOptions::default()).len(), 4);
    }

    #[test]
    fn svd_directions_on_a_wide_layer() {
        let net = Network::random_relu(3, &[50, 40], 1, 4);
        let d = facet_directions(50, &net.hidden[1].weights, &TightenOptions::default());
        let svd = d.iter().filter(|x| x.1 == FacetSource::Svd).count();
        assert_eq!(d.len() - svd, 100);
        assert_eq!(svd, 50);
    }

    #[test]
    fn lp_examples() {
        let w = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::zeros(1);
        let simplex = poly(vec![vec![-1.0, 0.0], vec![0.0, -1.0], vec![1.0, 1.0]], vec![0.0, 0.0, 1.0]);
        let r = lp_preactivation_bounds(&simplex, &w, &b, &tol()).unwrap()[0];
        assert!(r.lo.abs() < 1e-7 && (r.hi - 1.0).abs() < 1e-7, "{r:?}");
        let mut unit = poly(vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]], vec![1.0, 0.0, 1.0, 0.0]);
        let r = lp_preactivation_bounds(&unit, &w, &b, &tol()).unwrap()[0];
        assert!((r.hi - 2.0).abs() < 1e-7 && r.lo.abs() < 1e-7);
        unit.normals.push(vec![1.0, 1.0]);
        unit.offsets.push(1.0);
        let r = lp_preactivation_bounds(&unit, &w, &b, &tol()).unwrap()[0];
        assert!((r.hi - 1.0).abs() < 1e-7);
        let empty = poly(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![-1.0, -1.0]);
        assert!(matches!(lp_preactivation_bounds(&empty, &w, &b, &tol()), Err(Error::Inconsistent(_))));
    }

    #[test]
    fn box_lp_matches_interval_arithmetic() {
        let w = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, -0.3, 0.0, 4.0]);
        let b = DVector::from_column_slice(&[0.1, -1.0]);
        let lo = [-1.0, 0.0, 2.0];
        let hi = [1.0, 0.5, 3.0];
        let mut normals = vec![];
        let mut offsets = vec![];
        for i in 0..3 {
            let mut e = vec![0.0; 3];
            e[i] = 1.0;
            normals.push(e.clone());
            offsets.push(hi[i]);
            e[i] = -1.0;
            normals.push(e);
            offsets.push(-lo[i]);
        }
        let r = lp_preactivation_bounds(&poly(normals, offsets), &w, &b, &tol()).unwrap();
        for i in 0..2 {
            let (mut elo, mut ehi) = (b[i], b[i]);
            for j in 0..3 {
                let (p, q) = (w[(i, j)] * lo[j], w[(i, j)] * hi[j]);
                elo += p.min(q);
                ehi += p.max(q);
            }
            assert!((r[i].lo - elo).abs() < 1e-7 && (r[i].hi - ehi).abs() < 1e-7, "{:?} vs {elo} {ehi}", r[i]);
        }
    }

    #[test]
    fn first_layer_polytope_matches_ibp() {
        for seed in 0..3 {
            let net = Network::random_relu(2, &[4, 3], 1, seed);
            let bx = InputBox::uniform(2, -1.0, 1.0);
            let ibp = interval_propagate(&net, &bx).unwrap();
            let opts = TightenOptions {
                svd_count: 0,
                ..TightenOptions::default()
            };
            let p = layer_polytope(&net, &bx, &ibp, 0, &opts, &tol()).unwrap();
            for (k, &i) in p.kept.iter().enumerate() {
                let post = ibp.layers[0][i].post;
                assert!((p.offsets[2 * k] - post.hi).abs() < 1e-6, "seed {seed}");
                assert!((p.offsets[2 * k + 1] + post.lo).abs() < 1e-6, "seed {seed}");
            }
        }
    }

    #[test]
    fn anticorrelated_layer_tightens() {
        let net = anticorrelated();
        let bx = InputBox::uniform(1, -1.0, 1.0);
        let t = tighten_network(&net, &bx, &TightenOptions::default(), &tol()).unwrap();
        let (ib, tb) = (t.ibp.layers[1][0].pre, t.bounds.layers[1][0].pre);
        // true range of |x| - 0.5 is [-0.5, 0.5]
        assert!((ib.hi - 1.5).abs() < 1e-12);
        assert!(tb.hi < 0.5 + 1e-6 && tb.hi > 0.5 - 1e-6, "{tb:?}");
        assert!(tb.lo >= ib.lo - 1e-12);
        let report = TightenReport::new(&t);
        assert!(report.layers[1].mean_reduction > 25.0);
        assert!(report.neurons.iter().all(|n| n.reduction >= 0.0));
    }

    #[test]
    fn single_layer_is_unchanged() {
        let net = Network::random_relu(2, &[5], 2, 1);
        let bx = InputBox::uniform(2, -1.0, 1.0);
        let t = tighten_network(&net, &bx, &TightenOptions::default(), &tol()).unwrap();
        assert_eq!(t.ibp, t.bounds);
        assert!(t.polytopes.is_empty());
    }

    #[test]
    fn tightened_bounds_contain_samples() {
        let net = Network::random_relu(3, &[6, 6, 5], 2, 11);
        let bx = InputBox::uniform(3, -1.0, 1.0);
        let t = tighten_network(&net, &bx, &TightenOptions::default(), &tol()).unwrap();
        for x in bx.sample(2000, 3) {
            let tr = net.forward_trace(&x);
            for l in 0..3 {
                for (i, b) in t.bounds.layers[l].iter().enumerate() {
                    assert!(tr.pre[l][i] >= b.pre.lo - 1e-6 && tr.pre[l][i] <= b.pre.hi + 1e-6);
                    let ib = t.ibp.layers[l][i].pre;
                    assert!(b.pre.lo >= ib.lo - 1e-12 && b.pre.hi <= ib.hi + 1e-12);
                }
            }
            for p in &t.polytopes {
                let theta: Vec<f64> = p.kept.iter().map(|&i| tr.post[p.layer][i]).collect();
                assert!(p.contains(&theta, 1e-6));
            }
        }
    }
}
