use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use deer_core::analytic::{fbp, FilterKernel, FilterKind};
use deer_core::image::equispaced_angles;
use deer_core::model::{bp_forward, BpLayer, BpScaling, BpVariant, Padding, UNet, UNET_FILTERS};
use deer_core::phantom::{make_phantom, PhantomSpec};
use deer_core::projector::radon;
use deer_core::tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const N: usize = 64;

fn projectors(c: &mut Criterion) {
    let img = make_phantom(&PhantomSpec::shepp_logan(), N).unwrap();
    let few = equispaced_angles(15);
    c.bench_function("radon 64px 30 views", |b| {
        b.iter(|| radon(black_box(&img), &equispaced_angles(30), N).unwrap())
    });
    let sino = radon(&img, &few, N).unwrap();
    let kernel = FilterKernel::new(FilterKind::SheppLogan, N, 1.0).unwrap();
    c.bench_function("fbp 64px 15 views", |b| {
        b.iter(|| fbp(black_box(&sino), &kernel, N).unwrap())
    });
    let dense = radon(&img, &equispaced_angles(30), N).unwrap();
    let layer =
        BpLayer::<f32>::uniform(BpVariant::ViewDependent, N, N, 30, BpScaling::PerView, 1.0)
            .unwrap();
    c.bench_function("bp_forward 64px 30 views", |b| {
        b.iter(|| bp_forward(&layer, black_box(&dense)).unwrap())
    });
}

fn conv(c: &mut Criterion) {
    let (cin, cout, k) = (UNET_FILTERS, UNET_FILTERS, 5);
    let x = Tensor::<f32>::param([3, cin, N, N], vec![0.1; 3 * cin * N * N]).unwrap();
    let w = Tensor::<f32>::param([cout, cin, k, k], vec![0.01; cout * cin * k * k]).unwrap();
    c.bench_function("conv2d 32->32 5x5 64px batch 3 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.input(&x);
            let wv = g.input(&w);
            let y = g.conv2d(xv, wv, None, 1, k / 2).unwrap();
            let l = g.mean(y);
            g.backward(l).unwrap()
        })
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let unet = UNet::<f32>::new(UNET_FILTERS, Padding::Same, false, &mut rng).unwrap();
    let input = Tensor::<f32>::param([3, 2, N, N], vec![0.2; 3 * 2 * N * N]).unwrap();
    let mut group = c.benchmark_group("unet");
    group.sample_size(10);
    group.bench_function("unet 64px batch 3 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = deer_core::model::Network::bind(&unet, &mut g);
            let xv = g.constant([3, 2, N, N], input.data().to_vec()).unwrap();
            let y = unet.forward(&mut g, &p, xv).unwrap();
            let l = g.mean(y);
            g.backward(l).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, projectors, conv);
criterion_main!(benches);
