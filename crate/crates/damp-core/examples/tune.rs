// Scratch calibration runs (deleted before release).
use damp_core::data::{split_retain_forget, synth_blobs_pair, BlobShape, ForgetSpec, LabeledDataset};
use damp_core::metrics::accuracy;
use damp_core::nn::train::{train, TrainConfig};
use damp_core::nn::{build_model, Arch, StageModel};
use damp_core::surgery::{compute_prototypes, forget_directions, unlearn, UnlearnConfig};
use std::collections::BTreeSet;

fn residual_share(model: &StageModel, train_data: &LabeledDataset, f: usize, classes: usize) -> Vec<f64> {
    let forget: BTreeSet<usize> = [f].into_iter().collect();
    let retain: BTreeSet<usize> = (0..classes).filter(|c| *c != f).collect();
    let mut all = retain.clone();
    all.extend(forget.iter().copied());
    let table = compute_prototypes(model, train_data, &all).unwrap();
    (1..=5)
        .map(|stage| {
            let mu = &table.get(stage, f).unwrap().mean;
            let (dirs, sk) = forget_directions(&table, &retain, &forget, stage, 1e-8).unwrap();
            let norm = if dirs.is_empty() { sk[0].1 } else { dirs[0].2 };
            norm / mu.dot(mu).sqrt()
        })
        .collect()
}

fn damp_eval(model: &StageModel, train_data: &LabeledDataset, test_data: &LabeledDataset) -> (f64, f64, f64, f64) {
    let spec = ForgetSpec::new([3]);
    let (retain_test, forget_test) = split_retain_forget(test_data, &spec).unwrap();
    let base_r = accuracy(model, &retain_test).unwrap();
    let base_f = accuracy(model, &forget_test).unwrap();
    let (edited, _) = unlearn(model, train_data, &UnlearnConfig::new(spec, 11)).unwrap();
    let after_r = accuracy(&edited, &retain_test).unwrap();
    let after_f = accuracy(&edited, &forget_test).unwrap();
    (base_r, base_f, after_r, after_f)
}

fn main() {
    println!("== mlp5 epoch sweep ==");
    let (train_data, test_data) = synth_blobs_pair(10, 60, 20, BlobShape::Flat(24), 10.0, 7).unwrap();
    for epochs in [4, 6, 8, 12, 20, 30] {
        let mut model = build_model(Arch::Mlp5, 24, 10, 42).unwrap();
        let cfg = TrainConfig {
            epochs,
            batch_size: 64,
            learning_rate: 0.01,
            weight_decay: 1e-4,
            seed: 42,
            ..TrainConfig::default()
        };
        train(&mut model, &train_data, &cfg).unwrap();
        let test_acc = accuracy(&model, &test_data).unwrap();
        let shares = residual_share(&model, &train_data, 3, 10);
        let shares_s: Vec<String> = shares.iter().map(|v| format!("{v:.2}")).collect();
        print!("epochs={epochs} test={test_acc:.2} resid_share=[{}]", shares_s.join(","));
        if test_acc >= 95.0 {
            let (br, bf, ar, af) = damp_eval(&model, &train_data, &test_data);
            print!("  DAMP r {br:.1}->{ar:.1} f {bf:.1}->{af:.1}");
        }
        println!();
    }

    println!("== mlp5 + batchnorm sweep ==");
    for (dim, epochs) in [(24usize, 12), (24, 30), (144, 12), (144, 30)] {
        let (train_data, test_data) = synth_blobs_pair(10, 60, 20, BlobShape::Flat(dim), 10.0, 7).unwrap();
        let mut model = build_model(Arch::Mlp5, dim, 10, 42).unwrap();
        for stage in model.stages.iter_mut() {
            let width = stage.op.out_channels();
            stage.norm = Some(damp_core::nn::layers::BatchNorm::new(width));
        }
        let cfg = TrainConfig {
            epochs,
            batch_size: 64,
            learning_rate: 0.01,
            weight_decay: 1e-4,
            seed: 42,
            ..TrainConfig::default()
        };
        train(&mut model, &train_data, &cfg).unwrap();
        let test_acc = accuracy(&model, &test_data).unwrap();
        let shares = residual_share(&model, &train_data, 3, 10);
        let shares_s: Vec<String> = shares.iter().map(|v| format!("{v:.2}")).collect();
        print!("dim={dim} epochs={epochs} test={test_acc:.2} resid_share=[{}]", shares_s.join(","));
        if test_acc >= 95.0 {
            let (br, bf, ar, af) = damp_eval(&model, &train_data, &test_data);
            print!("  DAMP r {br:.1}->{ar:.1} f {bf:.1}->{af:.1}");
        }
        println!();
    }

    println!("== cnn5-mini epoch sweep ==");
    let (train_img, test_img) = synth_blobs_pair(10, 40, 15, BlobShape::Image(1, 12, 12), 12.0, 5).unwrap();
    for epochs in [8, 15, 25, 40] {
        let mut model = build_model(Arch::Cnn5Mini, 1, 10, 42).unwrap();
        let cfg = TrainConfig {
            epochs,
            batch_size: 64,
            learning_rate: 0.02,
            weight_decay: 1e-4,
            seed: 42,
            ..TrainConfig::default()
        };
        train(&mut model, &train_img, &cfg).unwrap();
        let test_acc = accuracy(&model, &test_img).unwrap();
        let shares = residual_share(&model, &train_img, 3, 10);
        let shares_s: Vec<String> = shares.iter().map(|v| format!("{v:.2}")).collect();
        print!("epochs={epochs} test={test_acc:.2} resid_share=[{}]", shares_s.join(","));
        if test_acc >= 95.0 {
            let (br, bf, ar, af) = damp_eval(&model, &train_img, &test_img);
            print!("  DAMP r {br:.1}->{ar:.1} f {bf:.1}->{af:.1}");
        }
        println!();
    }
}
