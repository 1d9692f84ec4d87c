use std::path::Path;

use criterion::{criterion_group, criterion_main, Criterion};

use qcert_core::candgen::{assemble_candidate_qp, solve_candidate, CandidateSpec};
use qcert_core::conic::ToleranceProfile;
use qcert_core::network::{BlockStrategy, InputBox, Network};
use qcert_core::pipeline::{characterize, verification_pieces, Recipe};
use qcert_core::reach::{box_directions, prepare, reach_polytope, Method};
use qcert_core::relation::{Interval, Placement, SampleSet, ScalarRelation};
use qcert_core::soscert::{verify_union, SosSettings};
use qcert_core::tighten::{tighten_network, TightenOptions};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn characterization(c: &mut Criterion) {
    let tol = ToleranceProfile::default();
    let rel = ScalarRelation::sat(1.0, 5.0);
    let samples = SampleSet {
        local: rel
            .sample_graph(Interval::new(-0.8, 0.0), 20, 1, Placement::Uniform)
            .unwrap()
            .into_iter()
            .map(|p| (0, p))
            .collect(),
        global: rel.sample_graph(Interval::new(-5.0, 5.0), 500, 0, Placement::Uniform).unwrap(),
        exterior: vec![],
    };
    c.bench_function("candidate_qp_sat_500", |b| {
        b.iter(|| {
            let qp = assemble_candidate_qp(&samples, 0, &CandidateSpec::sat_profile()).unwrap();
            solve_candidate(&qp, &tol).unwrap()
        })
    });

    let (recipe, rel) = Recipe::load(&fixture("tanh.recipe.toml")).unwrap();
    let (family, _) = characterize(&recipe, &rel, recipe.seed, &tol).unwrap();
    let (pieces, _) = verification_pieces(&recipe.verify, &rel).unwrap();
    let q = family.records[0].form();
    c.bench_function("sos_verify_tanh_candidate", |b| {
        b.iter(|| verify_union(&q, &pieces, &SosSettings::default()).unwrap())
    });
}

fn analysis(c: &mut Criterion) {
    let tol = ToleranceProfile::default();
    let net = Network::random_relu(3, &[8, 8], 2, 0);
    let bx = InputBox::uniform(3, -1.0, 1.0);
    let mut group = c.benchmark_group("reach_box_8x8");
    group.sample_size(10);
    let comb = Method::Comb {
        s_max: 3,
        strategy: BlockStrategy::Sequential,
    };
    for m in [Method::Ep, comb] {
        let an = prepare(&net, &bx, m, &TightenOptions::default(), &tol).unwrap();
        group.bench_function(m.name(), |b| b.iter(|| reach_polytope(&an.lmi, &box_directions(2), &tol).unwrap()));
    }
    group.finish();
    c.bench_function("tighten_8x8", |b| {
        b.iter(|| tighten_network(&net, &bx, &TightenOptions::default(), &tol).unwrap())
    });
}

criterion_group!(benches, characterization, analysis);
criterion_main!(benches);
