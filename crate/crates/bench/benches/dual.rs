use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;

use wgflow_core::model::sample_pairs;
use wgflow_core::rkhs::{gram_matvec, GramMatrix};
use wgflow_core::{
    Basis, DiagGaussian, Domain, DualObjectiveInstance, FreeEnergy, KernelSpec, PotentialSpec,
    Regularizer, RegularizerKind,
};

fn lattice(count: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((count, 1), |(k, _)| lo + (hi - lo) * k as f64 / (count - 1) as f64)
}

fn instance(n: usize, centres: usize, kind: RegularizerKind) -> DualObjectiveInstance {
    let domain = Domain::interval(-4.0, 4.0).unwrap();
    let samples = sample_pairs(&domain, n, 7).unwrap();
    let nu = DiagGaussian::isotropic(vec![0.3], 0.5).unwrap();
    let fe = FreeEnergy::new(PotentialSpec::SineWell, 1.0).unwrap();
    let basis = Basis {
        kernel: KernelSpec::gaussian(0.1),
        support: lattice(centres, -4.0, 4.0),
    };
    DualObjectiveInstance::new(
        &samples,
        &nu,
        fe,
        Regularizer::from_kind(kind),
        1e-4,
        0.2,
        basis.clone(),
        basis,
        usize::MAX,
    )
    .unwrap()
}

fn dual_eval(c: &mut Criterion) {
    let mut group = c.benchmark_group("dual_value_and_gradient");
    group.sample_size(20);
    for &n in &[1_000usize, 10_000] {
        for (name, kind) in [("l2", RegularizerKind::L2), ("entropy", RegularizerKind::Entropy)] {
            let inst = instance(n, 161, kind);
            let z = vec![0.01; inst.g_len() + inst.h_len()];
            group.bench_with_input(BenchmarkId::new(name, n), &z, |b, z| {
                b.iter(|| inst.value_and_gradient_joint(black_box(z)).unwrap())
            });
        }
    }
    group.finish();
}

fn hessian(c: &mut Criterion) {
    let inst = instance(10_000, 56, RegularizerKind::L2);
    let z = vec![0.01; inst.g_len() + inst.h_len()];
    c.bench_function("dual_hessian_n10000_p56", |b| {
        b.iter(|| inst.hessian_joint(black_box(&z)).unwrap())
    });
}

fn matvec(c: &mut Criterion) {
    let mut group = c.benchmark_group("gram_matvec");
    let kernel = KernelSpec::gaussian(0.1);
    let xs = lattice(10_000, -4.0, 4.0);
    let centres = lattice(161, -4.0, 4.0);
    let dense = Array2::from_shape_fn((10_000, 161), |(i, k)| {
        let d = xs[[i, 0]] - centres[[k, 0]];
        (-d * d / (2.0 * 0.01)).exp()
    });
    let alpha = ndarray::Array1::from_elem(161, 0.5);
    group.bench_function("dense", |b| b.iter(|| gram_matvec(black_box(&dense), alpha.view())));
    let compact = GramMatrix::compact(dense.clone(), &kernel);
    let a = alpha.to_vec();
    group.bench_function("compact", |b| b.iter(|| compact.matvec(black_box(&a))));
    let v = vec![1.0; 10_000];
    group.bench_function("compact_transpose", |b| b.iter(|| compact.t_matvec(black_box(&v))));
    group.finish();
}

criterion_group!(benches, dual_eval, hessian, matvec);
criterion_main!(benches);
