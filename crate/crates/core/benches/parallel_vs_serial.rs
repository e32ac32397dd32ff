//! Benchmarks the data-parallel kernels under different worker pools.
//!
//! With the default `parallel` feature the suite runs every kernel on a
//! 1-thread pool (the serial baseline) and on a pool sized to the machine;
//! built with `--no-default-features` it measures the sequential fallback
//! directly.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use graspdiff_core::dataset::{antipodal_grasps, default_shape_specs, OracleField};
use graspdiff_core::diffusion::{sample, NoiseSchedule};
use graspdiff_core::eval::{chamfer, GripperSpec};
use graspdiff_core::geometry::{normalize_cloud, sample_surface, Bvh};
use graspdiff_core::model::{ModelConfig, ModelWeights};
use graspdiff_core::rng::stream_rng;
use graspdiff_core::se3::PoseBounds;
use nalgebra::Vector3;
use rand::Rng;

struct Fixture {
    model: ModelWeights,
    ctx: graspdiff_core::model::ShapeContext,
    oracle: OracleField,
    cloud_a: Vec<Vector3<f64>>,
    cloud_b: Vec<Vector3<f64>>,
}

fn fixture() -> Fixture {
    let mut rng = stream_rng(7, 0);
    let spec = default_shape_specs().remove(0);
    let mesh = spec.make();
    let bvh = Bvh::build(&mesh);
    let gripper = GripperSpec::default();
    let cloud = sample_surface(&mesh, 1000, &mut rng);
    let (normed, transform) = normalize_cloud(&cloud).unwrap();
    let cfg = ModelConfig {
        resolution: 32,
        feat_dim: 16,
    };
    let model = ModelWeights::init(&cfg, gripper.query_cloud(), vec![1.0, 0.1, 0.01], &mut rng);
    let ctx = model.build_context(&normed, transform).unwrap();
    let (labels, _) = antipodal_grasps(&mesh, &bvh, &gripper, 32, 0.3, &mut rng);
    let oracle = OracleField::new(labels.iter().map(|l| l.pose).collect(), 0.05, 0.1);
    let cloud_a: Vec<Vector3<f64>> = (0..1000)
        .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
        .collect();
    let cloud_b: Vec<Vector3<f64>> = (0..1000)
        .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
        .collect();
    Fixture {
        model,
        ctx,
        oracle,
        cloud_a,
        cloud_b,
    }
}

#[cfg(feature = "parallel")]
fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let n = std::thread::available_parallelism().map_or(4, |v| v.get());
    [1usize, n]
        .iter()
        .map(|&k| {
            (
                format!("{k}thread"),
                rayon::ThreadPoolBuilder::new()
                    .num_threads(k)
                    .build()
                    .unwrap(),
            )
        })
        .collect()
}

fn bench_kernels(c: &mut Criterion) {
    let fx = fixture();
    let schedule = NoiseSchedule::geometric(10, 0.5, 0.05, 2e-2, 2);
    let bounds = PoseBounds::new(Vector3::zeros(), Vector3::repeat(0.15));

    let run_encode = || {
        let mut rng = stream_rng(9, 1);
        let spec = default_shape_specs().remove(0);
        let cloud = sample_surface(&spec.make(), 1000, &mut rng);
        let (normed, transform) = normalize_cloud(&cloud).unwrap();
        fx.model.build_context(&normed, transform).unwrap()
    };
    let run_oracle_chains = || sample(&fx.oracle, &bounds, 16, &schedule, 3);
    let run_model_chains = || {
        let field = graspdiff_core::diffusion::ModelField {
            model: &fx.model,
            ctx: &fx.ctx,
        };
        sample(&field, &bounds, 4, &schedule, 3)
    };
    let run_chamfer = || chamfer(&fx.cloud_a, &fx.cloud_b);

    #[cfg(feature = "parallel")]
    {
        let mut group = c.benchmark_group("parallel");
        group.sample_size(10);
        for (name, pool) in pools() {
            group.bench_function(BenchmarkId::new("encode", &name), |b| {
                b.iter(|| pool.install(run_encode))
            });
            group.bench_function(BenchmarkId::new("langevin_oracle_m16", &name), |b| {
                b.iter(|| pool.install(run_oracle_chains))
            });
            group.bench_function(BenchmarkId::new("langevin_model_m4", &name), |b| {
                b.iter(|| pool.install(run_model_chains))
            });
            group.bench_function(BenchmarkId::new("chamfer_1k", &name), |b| {
                b.iter(|| pool.install(run_chamfer))
            });
        }
        group.finish();
    }

    #[cfg(not(feature = "parallel"))]
    {
        let mut group = c.benchmark_group("sequential");
        group.sample_size(10);
        group.bench_function(BenchmarkId::new("encode", "fallback"), |b| {
            b.iter(run_encode)
        });
        group.bench_function(BenchmarkId::new("langevin_oracle_m16", "fallback"), |b| {
            b.iter(run_oracle_chains)
        });
        group.bench_function(BenchmarkId::new("langevin_model_m4", "fallback"), |b| {
            b.iter(run_model_chains)
        });
        group.bench_function(BenchmarkId::new("chamfer_1k", "fallback"), |b| {
            b.iter(run_chamfer)
        });
        group.finish();
    }
}

criterion_group!(benches, bench_kernels);
criterion_main!(benches);
