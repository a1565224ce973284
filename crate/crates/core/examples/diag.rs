// Temporary diagnostic: rank1 across variants and scales.
use manet_core::eval::Interval;
use manet_core::lang::EmbeddingTable;
use manet_core::model::*;
use manet_core::rng::RngState;
use manet_core::synth::*;
use manet_core::tape::Tape;
use manet_core::tensor::Tensor;
use manet_core::train::*;
use manet_core::video::PyramidConfig;

fn run_b(cells: usize, align: bool, scale: f64, epochs: usize, lr: f64, batch: usize) -> (f64, f64) {
    let spec = SynthSpec { plain: 60, ordinal: 0, relational: 0, dim: 16, seed: 100, feature_scale: scale, ..Default::default() };
    let data = generate(&spec).unwrap();
    let table = EmbeddingTable::build(&data.vocab, 1);
    let mut config = ModelConfig::new(16, 16, PyramidConfig::didemo());
    config.igan_cells = cells;
    config.feature_alignment = align;
    let model = MomentModel::init(config, 1).unwrap();
    let hp = HyperParams { learning_rate: lr, batch_size: batch, seed: 1, log_rank1: false, ..Default::default() };
    let mut trainer = Trainer::new(model, hp);

    let mut frng = RngState::derive(spec.seed, "synth-features");
    let feats: Vec<_> = data.videos.iter().map(|v| synth_features(v, &data.events, &spec, &mut frng)).collect();
    let n = data.videos.len();
    let mut last_loss = 0.0;
    for ep in 0..epochs {
        if ep % 30 == 0 {
            let norms: Vec<String> = ["pyramid.stage1.kernel", "pyramid.stage3.kernel", "filter.weight", "lstm.w_recurrent"].iter().map(|n| {
                let t = trainer.model.params.get(n).unwrap();
                let norm = (t.values().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64).sqrt();
                format!("{n}={norm:.3}")
            }).collect();
            let bias = trainer.model.params.get("pyramid.stage1.bias").unwrap();
            let bn = (bias.values().iter().map(|v| v * v).sum::<f64>() / bias.numel() as f64).sqrt();
            println!("  ep{ep}: rms {} stage1.bias={bn:.3}", norms.join(" "));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        trainer.shuffle_rng.shuffle(&mut idx);
        for chunk in idx.chunks(batch) {
            let mut tape = Tape::new();
            let watched = WatchedParams::watch(&mut tape, &trainer.model.params);
            let mut per = Vec::new();
            for &i in chunk {
                let ids = manet_core::lang::tokenize(&data.queries[i].text, &data.vocab).unwrap();
                let pass = trainer.model.forward_features(&mut tape, &ids, &table, &feats[i], &watched).unwrap();
                let gt = Interval::new(data.queries[i].ground_truth.start_seconds, data.queries[i].ground_truth.end_seconds).unwrap();
                let t = assign_targets(&pass.moments, gt, TargetMode::Zeroed).unwrap();
                per.push((pass.logits, t));
            }
            let loss = batch_loss(&mut tape, &per).unwrap();
            last_loss = tape.values(loss)[0];
            let grads = tape.backward(loss).unwrap();
            let ordered: Vec<Option<&Tensor>> = trainer.model.params.iter().map(|(nm, _)| watched.get(nm).ok().and_then(|v| grads.wrt(v))).collect();
            adam_step(&mut trainer.model.params, &ordered, &mut trainer.adam, &trainer.hp).unwrap();
        }
    }
    let mut hits = 0;
    for i in 0..n {
        let mut tape = Tape::new();
        let watched = WatchedParams::watch_constant(&mut tape, &trainer.model.params);
        let ids = manet_core::lang::tokenize(&data.queries[i].text, &data.vocab).unwrap();
        let pass = trainer.model.forward_features(&mut tape, &ids, &table, &feats[i], &watched).unwrap();
        let gt = Interval::new(data.queries[i].ground_truth.start_seconds, data.queries[i].ground_truth.end_seconds).unwrap();
        let t = assign_targets(&pass.moments, gt, TargetMode::Zeroed).unwrap();
        let logits = tape.values(pass.logits);
        let best = logits.iter().cloned().enumerate().max_by(|a, b| a.1.partial_cmp(&b.1).unwrap()).unwrap().0;
        if t[best] == 1.0 { hits += 1; }
    }
    (hits as f64 / n as f64, last_loss)
}

fn main() {
    // args: cells align scale epochs lr batch
    let a: Vec<String> = std::env::args().collect();
    let cells: usize = a[1].parse().unwrap();
    let align: bool = a[2].parse().unwrap();
    let scale: f64 = a[3].parse().unwrap();
    let epochs: usize = a[4].parse().unwrap();
    let lr: f64 = a[5].parse().unwrap();
    let batch: usize = a[6].parse().unwrap();
    let (r, l) = run_b(cells, align, scale, epochs, lr, batch);
    println!("cells={cells} align={align} scale={scale} epochs={epochs} lr={lr} batch={batch}  rank1={r:.3} loss={l:.4}");
}
