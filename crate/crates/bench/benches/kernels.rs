use criterion::{black_box, criterion_group, criterion_main, Criterion};

use textspot_bench::{box_grid, tensor};
use textspot_core::backbone::{FeatureMap, Level};
use textspot_core::geometry::TextBox;
use textspot_core::recognition::ctc_forward_backward;
use textspot_core::roi::{roi_recognition_align, RecognitionPoolConfig};
use textspot_core::rpn::nms;
use textspot_core::tensor::Conv2dSpec;
use textspot_core::{Config, Graph, Model};

fn conv(c: &mut Criterion) {
    let x = tensor(&[32, 32, 32], 1);
    let k = tensor(&[3, 3, 32, 32], 2);
    c.bench_function("conv2d 32x32x32 k3 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let kv = g.leaf(k.clone());
            let y = g.conv2d(xv, kv, Conv2dSpec::new(1, 1)).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(kv).map(|t| t.len()))
        })
    });
}

fn ctc(c: &mut Criterion) {
    let logits = tensor(&[40, 49], 3);
    let target = [5, 12, 12, 30, 7, 44];
    c.bench_function("ctc forward-backward W=40 K=49 |y|=6", |b| {
        b.iter(|| black_box(ctc_forward_backward(&logits, &target).unwrap().loss))
    });
}

fn pooling(c: &mut Criterion) {
    let map = tensor(&[32, 32, 32], 4);
    let cfg = RecognitionPoolConfig::SMALL;
    let bx = TextBox::new(60.0, 40.0, 70.0, 16.0).with_theta(0.1);
    c.bench_function("roi_recognition_align 5x180 C=32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let m = g.leaf(map.clone());
            let fm = FeatureMap { level: Level::C2, stride: 4, tensor: m };
            black_box(roi_recognition_align(&mut g, &fm, &bx, &cfg).unwrap().valid_width)
        })
    });
}

fn suppression(c: &mut Criterion) {
    let boxes = box_grid(300);
    c.bench_function("nms 300 boxes", |b| b.iter(|| black_box(nms(&boxes, 0.5).len())));
}

fn inference(c: &mut Criterion) {
    let cfg = Config::default();
    let model = Model::new(cfg.model.clone(), 0).unwrap();
    let image = tensor(&[128, 128, 3], 5).map(|v| 0.5 + 0.5 * v);
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("detect 128x128", |b| b.iter(|| black_box(model.detect(&image, &cfg.infer).unwrap().len())));
    group.finish();
}

criterion_group!(benches, conv, ctc, pooling, suppression, inference);
criterion_main!(benches);
