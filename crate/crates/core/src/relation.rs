//! Scalar relations `S` in the plane, restricted to a compact input domain,
//! and the sampling routines that feed candidate generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::Polynomial2;

/// Absolute tolerance for graph membership.
pub const GRAPH_TOL: f64 = 1e-10;
/// Default minimum distance of exterior samples from the graph.
pub const DEFAULT_EXTERIOR_SEPARATION: f64 = 1e-3;

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn is_empty(&self) -> bool {
        !(self.lo <= self.hi)
    }

    /// `(x - lo)(hi - x)`, nonnegative exactly on the interval.
    pub fn quadratic_indicator(&self) -> Polynomial2 {
        Polynomial2::from_terms([
            ((2, 0), -1.0),
            ((1, 0), self.lo + self.hi),
            ((0, 0), -self.lo * self.hi),
        ])
    }
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

/// A point `z = (x, y)` of the plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Basic semialgebraic set `{z : g_j(z) >= 0 for all j}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemialgebraicPiece {
    pub label: String,
    pub constraints: Vec<Polynomial2>,
    /// Sub-domain of `x` covered by this piece, when the piece restricts `x`
    /// to an interval. Also used to condition the SOS programs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<Interval>,
    /// `y = p(x)` when the piece is a segment of a function graph.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<Polynomial2>,
}

impl SemialgebraicPiece {
    pub fn new(label: impl Into<String>, constraints: Vec<Polynomial2>) -> Result<Self> {
        let piece = Self {
            label: label.into(),
            constraints,
            interval: None,
            graph: None,
        };
        piece.validate()?;
        Ok(piece)
    }

    /// `{(x, y) : x in interval, y = p(x)}` encoded as `(x-a)(b-x) >= 0`,
    /// `y - p(x) >= 0`, `p(x) - y >= 0`, followed by any extra constraints.
    pub fn graph_segment(
        label: impl Into<String>,
        interval: Interval,
        p: Polynomial2,
        extra: Vec<Polynomial2>,
    ) -> Result<Self> {
        if p.depends_on_y() {
            return Err(Error::Invalid("graph polynomial must depend on x only".into()));
        }
        let y = Polynomial2::y();
        let mut constraints = vec![interval.quadratic_indicator(), &y - &p, &p - &y];
        constraints.extend(extra);
        let piece = Self {
            label: label.into(),
            constraints,
            interval: Some(interval),
            graph: Some(p),
        };
        piece.validate()?;
        Ok(piece)
    }

    pub fn validate(&self) -> Result<()> {
        if self.constraints.is_empty() {
            return Err(Error::Invalid(format!("piece '{}' has no constraints", self.label)));
        }
        if let Some(k) = self.constraints.iter().position(|g| !g.is_finite()) {
            return Err(Error::Invalid(format!(
                "piece '{}' constraint {k} has non-finite coefficients",
                self.label
            )));
        }
        if let Some(i) = self.interval {
            if i.is_empty() || !i.lo.is_finite() || !i.hi.is_finite() {
                return Err(Error::Invalid(format!("piece '{}' has an empty interval", self.label)));
            }
        }
        Ok(())
    }

    /// Smallest constraint value at `z`; nonnegative iff `z` lies in the piece.
    pub fn min_constraint(&self, x: f64, y: f64) -> f64 {
        self.constraints
            .iter()
            .map(|g| g.eval(x, y))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    #[default]
    None,
    Odd,
    Even,
}

/// Built-in point evaluators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Evaluator {
    Tanh,
    Sat { limit: f64 },
    Relu,
}

impl Evaluator {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Evaluator::Tanh => x.tanh(),
            Evaluator::Sat { limit } => x.clamp(-limit, limit),
            Evaluator::Relu => x.max(0.0),
        }
    }

    pub fn from_name(name: &str, sat_limit: Option<f64>) -> Result<Self> {
        match name {
            "tanh" => Ok(Evaluator::Tanh),
            "relu" => Ok(Evaluator::Relu),
            "sat" => Ok(Evaluator::Sat {
                limit: sat_limit.unwrap_or(1.0),
            }),
            other => Err(Error::Invalid(format!("unknown evaluator '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    PiecewisePolynomial,
    Evaluator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Stratified uniform: one point drawn uniformly in each of `n` equal cells.
    Uniform,
    /// Half of the points within 10% of the interval length of an endpoint
    /// or declared breakpoint, the rest stratified uniform.
    BoundaryWeighted,
}

/// A scalar relation restricted to a compact domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarRelation {
    pub name: String,
    pub kind: RelationKind,
    pub domain: Interval,
    #[serde(default)]
    pub symmetry: Symmetry,
    #[serde(default)]
    pub pieces: Vec<SemialgebraicPiece>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluator: Option<Evaluator>,
    /// Lipschitz bound of the evaluator on the domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    #[serde(default)]
    pub breakpoints: Vec<f64>,
}

impl ScalarRelation {
    pub fn evaluator(
        name: impl Into<String>,
        evaluator: Evaluator,
        domain: Interval,
        lipschitz: f64,
        symmetry: Symmetry,
    ) -> Result<Self> {
        let rel = Self {
            name: name.into(),
            kind: RelationKind::Evaluator,
            domain,
            symmetry,
            pieces: Vec::new(),
            evaluator: Some(evaluator),
            lipschitz: Some(lipschitz),
            breakpoints: Vec::new(),
        };
        rel.validate()?;
        Ok(rel)
    }

    pub fn piecewise(
        name: impl Into<String>,
        domain: Interval,
        pieces: Vec<SemialgebraicPiece>,
        breakpoints: Vec<f64>,
        symmetry: Symmetry,
    ) -> Result<Self> {
        let rel = Self {
            name: name.into(),
            kind: RelationKind::PiecewisePolynomial,
            domain,
            symmetry,
            pieces,
            evaluator: None,
            lipschitz: None,
            breakpoints,
        };
        rel.validate()?;
        Ok(rel)
    }

    /// `tanh` on `[-r, r]` with Lipschitz bound 1.
    pub fn tanh(r: f64) -> Self {
        Self::evaluator("tanh", Evaluator::Tanh, Interval::new(-r, r), 1.0, Symmetry::Odd)
            .expect("tanh relation is valid")
    }

    /// Saturation with the given limit on `[-r, r]`, described exactly by
    /// three graph segments.
    pub fn sat(limit: f64, r: f64) -> Self {
        assert!(r > limit && limit > 0.0);
        let pieces = vec![
            SemialgebraicPiece::graph_segment(
                "lower",
                Interval::new(-r, -limit),
                Polynomial2::constant(-limit),
                vec![],
            ),
            SemialgebraicPiece::graph_segment(
                "linear",
                Interval::new(-limit, limit),
                Polynomial2::x(),
                vec![],
            ),
            SemialgebraicPiece::graph_segment(
                "upper",
                Interval::new(limit, r),
                Polynomial2::constant(limit),
                vec![],
            ),
        ]
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .expect("sat pieces are valid");
        let mut rel = Self::piecewise("sat", Interval::new(-r, r), pieces, vec![-limit, limit], Symmetry::Odd)
            .expect("sat relation is valid");
        rel.evaluator = Some(Evaluator::Sat { limit });
        rel.lipschitz = Some(1.0);
        rel
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.domain;
        if d.is_empty() || !d.lo.is_finite() || !d.hi.is_finite() {
            return Err(Error::Invalid(format!("relation '{}' has an invalid domain", self.name)));
        }
        match self.kind {
            RelationKind::Evaluator => {
                if self.evaluator.is_none() {
                    return Err(Error::Invalid("evaluator relation without evaluator".into()));
                }
                match self.lipschitz {
                    Some(l) if l.is_finite() && l >= 0.0 => {}
                    _ => {
                        return Err(Error::Invalid(
                            "evaluator relation must declare a finite Lipschitz bound".into(),
                        ))
                    }
                }
            }
            RelationKind::PiecewisePolynomial => {
                if self.pieces.is_empty() {
                    return Err(Error::Invalid("piecewise relation without pieces".into()));
                }
                for p in &self.pieces {
                    p.validate()?;
                    let iv = p.interval.ok_or_else(|| {
                        Error::Invalid(format!("piece '{}' must declare its interval", p.label))
                    })?;
                    if !d.contains_interval(&iv) {
                        return Err(Error::Invalid(format!(
                            "piece '{}' interval [{}, {}] leaves the domain",
                            p.label, iv.lo, iv.hi
                        )));
                    }
                }
                self.check_cover()?;
                self.check_boundary_agreement()?;
            }
        }
        if self.symmetry == Symmetry::Odd {
            self.check_odd_symmetry()?;
        }
        Ok(())
    }

    fn check_cover(&self) -> Result<()> {
        let mut ivs: Vec<Interval> = self.pieces.iter().filter_map(|p| p.interval).collect();
        ivs.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        let mut reach = self.domain.lo;
        for iv in &ivs {
            if iv.lo > reach {
                return Err(Error::Invalid(format!(
                    "pieces leave a gap in the domain after x = {reach}"
                )));
            }
            reach = reach.max(iv.hi);
        }
        if reach < self.domain.hi {
            return Err(Error::Invalid(format!(
                "pieces do not cover the domain beyond x = {reach}"
            )));
        }
        Ok(())
    }

    fn check_boundary_agreement(&self) -> Result<()> {
        for (i, a) in self.pieces.iter().enumerate() {
            for b in &self.pieces[i + 1..] {
                let (Some(ia), Some(ib), Some(pa), Some(pb)) = (a.interval, b.interval, &a.graph, &b.graph)
                else {
                    continue;
                };
                for x in [ia.lo, ia.hi] {
                    if ib.contains(x) && (pa.eval(x, 0.0) - pb.eval(x, 0.0)).abs() > GRAPH_TOL {
                        return Err(Error::Ambiguous {
                            x,
                            detail: format!("pieces '{}' and '{}' disagree", a.label, b.label),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn check_odd_symmetry(&self) -> Result<()> {
        let d = self.domain;
        let r = d.hi.min(-d.lo);
        if r <= 0.0 {
            return Ok(());
        }
        for k in 0..=64 {
            let x = r * k as f64 / 64.0;
            let (Ok(f), Ok(g)) = (self.eval(x), self.eval(-x)) else {
                continue;
            };
            if (f + g).abs() > 1e-9 * (1.0 + f.abs()) {
                return Err(Error::Invalid(format!(
                    "relation '{}' declared odd but f({x}) = {f}, f({}) = {g}",
                    self.name, -x
                )));
            }
        }
        Ok(())
    }

    /// Value `y` with `(x, y)` on the relation.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !self.domain.contains(x) {
            return Err(Error::Domain(format!(
                "x = {x} outside [{}, {}]",
                self.domain.lo, self.domain.hi
            )));
        }
        if let Some(e) = &self.evaluator {
            return Ok(e.eval(x));
        }
        let mut value: Option<f64> = None;
        for p in self.pieces.iter().filter(|p| p.interval.is_none_or(|i| i.contains(x))) {
            let Some(g) = &p.graph else {
                return Err(Error::Ambiguous {
                    x,
                    detail: format!("piece '{}' is not a function graph", p.label),
                });
            };
            let v = g.eval(x, 0.0);
            match value {
                Some(prev) if (prev - v).abs() > GRAPH_TOL => {
                    return Err(Error::Ambiguous {
                        x,
                        detail: format!("values {prev} and {v} from overlapping pieces"),
                    })
                }
                Some(_) => {}
                None => value = Some(v),
            }
        }
        value.ok_or_else(|| Error::Domain(format!("no piece covers x = {x}")))
    }

    /// Pieces whose interval contains `x`.
    pub fn pieces_at(&self, x: f64) -> impl Iterator<Item = &SemialgebraicPiece> {
        self.pieces
            .iter()
            .filter(move |p| p.interval.is_none_or(|i| i.contains(x)))
    }

    fn check_interval(&self, iv: Interval) -> Result<()> {
        if iv.is_empty() {
            return Err(Error::Domain(format!("empty interval [{}, {}]", iv.lo, iv.hi)));
        }
        if !self.domain.contains_interval(&iv) {
            return Err(Error::Domain(format!(
                "interval [{}, {}] not inside domain [{}, {}]",
                iv.lo, iv.hi, self.domain.lo, self.domain.hi
            )));
        }
        Ok(())
    }

    /// Sorted `x` locations, deterministic in `seed`.
    fn sample_xs(&self, iv: Interval, n: usize, seed: u64, placement: Placement) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(n);
        let n_uniform = match placement {
            Placement::Uniform => n,
            Placement::BoundaryWeighted => {
                let mut anchors = vec![iv.lo, iv.hi];
                anchors.extend(self.breakpoints.iter().copied().filter(|&b| iv.lo < b && b < iv.hi));
                let w = 0.1 * iv.width();
                let k = n.div_ceil(2);
                for i in 0..k {
                    let a = anchors[i % anchors.len()];
                    let x = a + w * rng.gen_range(-1.0..=1.0);
                    xs.push(x.clamp(iv.lo, iv.hi));
                }
                n - k
            }
        };
        let cell = iv.width() / n_uniform.max(1) as f64;
        for i in 0..n_uniform {
            let x = iv.lo + cell * (i as f64 + rng.gen::<f64>());
            xs.push(x.clamp(iv.lo, iv.hi));
        }
        xs.sort_by(f64::total_cmp);
        xs
    }

    /// `n` points on the graph over `iv`.
    pub fn sample_graph(&self, iv: Interval, n: usize, seed: u64, placement: Placement) -> Result<Vec<Point>> {
        self.check_interval(iv)?;
        if n == 0 {
            return Err(Error::Precondition("sample count must be at least 1".into()));
        }
        self.sample_xs(iv, n, seed, placement)
            .into_iter()
            .map(|x| Ok(Point::new(x, self.eval(x)?)))
            .collect()
    }

    /// Points `(x, f(x) + delta)` for `n` stratified `x` in `iv` and every
    /// offset `delta`, followed by the explicit `targets`. Every point must
    /// sit at least `separation` away from the graph.
    pub fn sample_exterior(
        &self,
        iv: Interval,
        n: usize,
        offsets: &[f64],
        targets: &[Point],
        seed: u64,
        separation: f64,
    ) -> Result<Vec<Point>> {
        if offsets.iter().any(|&d| d == 0.0 || !d.is_finite()) {
            return Err(Error::Precondition("exterior offsets must be nonzero".into()));
        }
        let mut out = Vec::with_capacity(n * offsets.len() + targets.len());
        if n > 0 && !offsets.is_empty() {
            self.check_interval(iv)?;
            for x in self.sample_xs(iv, n, seed, Placement::Uniform) {
                let fx = self.eval(x)?;
                out.extend(offsets.iter().map(|d| Point::new(x, fx + d)));
            }
        }
        out.extend_from_slice(targets);
        let rejected: Vec<String> = out
            .iter()
            .filter_map(|p| match self.graph_distance(p) {
                Ok(d) if d >= separation => None,
                Ok(d) => Some(format!("({}, {}) at distance {d:e}", p.x, p.y)),
                Err(e) => Some(format!("({}, {}): {e}", p.x, p.y)),
            })
            .collect();
        if !rejected.is_empty() {
            return Err(Error::Invalid(format!(
                "exterior points too close to the graph (separation {separation:e}): {}",
                rejected.join("; ")
            )));
        }
        Ok(out)
    }

    /// Vertical distance `|y - f(x)|` from the graph.
    pub fn graph_distance(&self, p: &Point) -> Result<f64> {
        Ok((p.y - self.eval(p.x)?).abs())
    }

    pub fn on_graph(&self, p: &Point) -> bool {
        self.graph_distance(p).is_ok_and(|d| d <= GRAPH_TOL)
    }
}

/// Tagged sample classes for candidate generation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    /// Points on the local restriction, tagged with their subdomain.
    pub local: Vec<(usize, Point)>,
    /// Points on the whole restricted graph.
    pub global: Vec<Point>,
    /// Points off the relation, tagged with their subdomain.
    pub exterior: Vec<(usize, Point)>,
}

impl SampleSet {
    pub fn local_for(&self, tag: usize) -> impl Iterator<Item = &Point> {
        self.local.iter().filter(move |(k, _)| *k == tag).map(|(_, p)| p)
    }

    pub fn exterior_for(&self, tag: usize) -> impl Iterator<Item = &Point> {
        self.exterior.iter().filter(move |(k, _)| *k == tag).map(|(_, p)| p)
    }
}

// --- relation spec file -------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationFile {
    name: String,
    kind: RelationKind,
    domain: [f64; 2],
    #[serde(default)]
    symmetry: Symmetry,
    #[serde(default)]
    breakpoints: Option<Vec<f64>>,
    #[serde(default)]
    evaluator: Option<String>,
    #[serde(default)]
    sat_limit: Option<f64>,
    #[serde(default)]
    lipschitz: Option<f64>,
    #[serde(default)]
    pieces: Vec<PieceRecord>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PieceRecord {
    label: String,
    interval: [f64; 2],
    /// `y = p(x)` as `[power, coefficient]` records.
    #[serde(default)]
    graph: Option<Vec<(u32, f64)>>,
    /// Extra `g_j >= 0` as `[i, j, coefficient]` records.
    #[serde(default)]
    constraints: Vec<Vec<(u32, u32, f64)>>,
}

impl ScalarRelation {
    /// Parses a relation spec file (TOML).
    pub fn from_spec_str(text: &str) -> Result<Self> {
        let f: RelationFile =
            toml::from_str(text).map_err(|e| Error::parse("relation spec", e.to_string()))?;
        let domain = Interval::from(f.domain);
        let mut pieces = Vec::with_capacity(f.pieces.len());
        for (k, rec) in f.pieces.into_iter().enumerate() {
            let loc = format!("pieces[{k}] ({})", rec.label);
            let extra = rec
                .constraints
                .into_iter()
                .map(Polynomial2::try_from)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(&loc, e))?;
            let iv = Interval::from(rec.interval);
            let piece = match rec.graph {
                Some(g) => {
                    if g.iter().any(|t| !t.1.is_finite()) {
                        return Err(Error::parse(&loc, "non-finite graph coefficient"));
                    }
                    let p = Polynomial2::from_terms(g.into_iter().map(|(i, c)| ((i, 0), c)));
                    SemialgebraicPiece::graph_segment(rec.label, iv, p, extra)
                }
                None => {
                    let mut cs = vec![iv.quadratic_indicator()];
                    cs.extend(extra);
                    let mut p = SemialgebraicPiece::new(rec.label, cs)?;
                    p.interval = Some(iv);
                    Ok(p)
                }
            }
            .map_err(|e| Error::parse(&loc, e.to_string()))?;
            pieces.push(piece);
        }
        let evaluator = f
            .evaluator
            .as_deref()
            .map(|n| Evaluator::from_name(n, f.sat_limit))
            .transpose()?;
        let breakpoints = f.breakpoints.unwrap_or_else(|| {
            let mut b: Vec<f64> = pieces
                .iter()
                .filter_map(|p| p.interval)
                .flat_map(|i| [i.lo, i.hi])
                .filter(|&x| domain.lo < x && x < domain.hi)
                .collect();
            b.sort_by(f64::total_cmp);
            b.dedup();
            b
        });
        let rel = ScalarRelation {
            name: f.name,
            kind: f.kind,
            domain,
            symmetry: f.symmetry,
            pieces,
            evaluator,
            lipschitz: f.lipschitz,
            breakpoints,
        };
        rel.validate()?;
        Ok(rel)
    }

    pub fn from_spec_file(path: &std::path::Path) -> Result<Self> {
        Self::from_spec_str(&std::fs::read_to_string(path)?)
    }
}
