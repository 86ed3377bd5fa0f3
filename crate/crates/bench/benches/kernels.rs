use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use peel_bench::{block, uniform};
use peel_core::model::{build_arch, random_init, ArchName, ArchOptions, InitScheme};
use peel_core::shallowinv::shallow_objective;
use peel_core::tensor::{conv2d, conv2d_adjoint};
use peel_core::{invert_block, resblock_forward, ConvGeometry, PenaltyConfig, ShallowConfig};

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3x3");
    // channels × spatial of the four ResNet-18 stages at width 32, 64×64 input
    for (ch, hw) in [(32, 32), (64, 16), (128, 8), (256, 4)] {
        let x = uniform(&[ch, hw, hw], 1);
        let k = uniform(&[ch, ch, 3, 3], 2);
        let geom = ConvGeometry::new(1, 1);
        let y = conv2d(&x, &k, &geom).unwrap();
        g.bench_with_input(BenchmarkId::new("forward", ch), &ch, |b, _| {
            b.iter(|| conv2d(black_box(&x), &k, &geom).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("adjoint", ch), &ch, |b, _| {
            b.iter(|| conv2d_adjoint(black_box(&y), &k, &geom, x.dims()).unwrap())
        });
    }
    g.finish();
}

fn block_solve(c: &mut Criterion) {
    let b = block([5, 8, 8], 5, 0);
    let y = resblock_forward(&uniform(&[5, 8, 8], 1), &b).unwrap();
    let cfg = PenaltyConfig {
        epochs: 200,
        ..PenaltyConfig::default()
    };
    c.bench_function("invert_block 5x8x8, 200 epochs", |bench| {
        bench.iter(|| invert_block(black_box(&y), &b, &cfg).unwrap())
    });
}

fn shallow(c: &mut Criterion) {
    let spec = build_arch(
        &ArchName::Resnet18,
        &ArchOptions {
            width: 32,
            ..ArchOptions::default()
        },
    )
    .unwrap();
    let net = random_init(&spec, &InitScheme::fan_in_uniform(0)).unwrap();
    let x = uniform(&[3, 64, 64], 3).scale(255.0);
    let target =
        peel_core::forward::stem_forward(&uniform(&[3, 64, 64], 4).scale(255.0), &net.stem)
            .unwrap();
    let cfg = ShallowConfig::default();
    c.bench_function("shallow objective 3x64x64", |b| {
        b.iter(|| shallow_objective(black_box(&x), &target, &net.stem, &cfg).unwrap())
    });
}

criterion_group!(benches, conv, block_solve, shallow);
criterion_main!(benches);
