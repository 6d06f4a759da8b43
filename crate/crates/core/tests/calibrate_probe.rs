//! Dev-only probe for toy-training calibration (ignored by default).

use bfn_core::bfn::{flow_sample, guided_output, sample, GenerationConfig, TimeSampling};
use bfn_core::data::read_smiles_lines;
use bfn_core::metrics::validity;
use bfn_core::network::{Denoiser, NetworkConfig};
use bfn_core::rng::StreamKey;
use bfn_core::schedule::{beta_one_max, ScheduleKind, ScheduleParams};
use bfn_core::tokenizer::{detokenize, tokenize, PaddingStrategy};
use bfn_core::train::{train_generative, AdamW, GenerativeData, LrSchedule, TrainConfig};
use bfn_core::vocab::build_vocabulary;
use std::collections::HashSet;
use std::time::Instant;

#[test]
#[ignore]
fn probe_toy_training() {
    let vocab = build_vocabulary();
    let text = include_str!("data/toy32.smi");
    let rows = read_smiles_lines(text.as_bytes()).unwrap();
    let train_set: HashSet<String> = rows.iter().map(|(_, s)| s.clone()).collect();
    let seqs: Vec<_> = rows.iter().map(|(_, s)| tokenize(s, &vocab).unwrap()).collect();
    let width = seqs.iter().map(|s| s.len()).max().unwrap();
    println!("corpus: {} molecules, max token length {width}", seqs.len());

    let schedule = ScheduleParams::new(ScheduleKind::LogForm, beta_one_max(246), 246).unwrap();
    for (epochs, batch, lr, clip, qk_scale) in [
        (200usize, 4usize, 5e-4f64, 0.25f64, 1.0f64),
        (150, 4, 5e-4, 0.25, 1.0),
    ] {
        let gate = 1.0f64;
        let t0 = Instant::now();
        let _ = (gate, qk_scale);
        let mut net = Denoiser::new(NetworkConfig::desk(246), &StreamKey::new(7)).unwrap();
        let mut opt = AdamW::new(net.params());
        let data = GenerativeData {
            sequences: seqs.clone(),
            labels: None,
            context_masks: None,
        };
        let cfg = TrainConfig {
            epochs,
            batch_size: batch,
            lr: LrSchedule { base: lr, warmup_init: 1e-8, warmup_steps: 50 },
            p_uncond: 0.0,
            padding: PaddingStrategy::Global(width),
            seed: 11,
            use_dropout: false,
            grad_clip: Some(clip),
            time_sampling: TimeSampling::AlphaImportanceStratified,
        };
        let mut losses = Vec::new();
        train_generative(&mut net, &mut opt, &data, &schedule, &vocab, &cfg, 0, 0, |s| {
            losses.push(s.loss)
        })
        .unwrap();
        let train_time = t0.elapsed();
        let first: f64 = losses[..8].iter().sum::<f64>() / 8.0;
        let last: f64 = losses[losses.len() - 8..].iter().sum::<f64>() / 8.0;

        let t1 = Instant::now();
        let gen_cfg = GenerationConfig {
            n_steps: 100,
            guidance_w: 0.0,
            seq_len: width,
            n_samples: 100,
            seed: 99,
            clamp: None,
            conditioning: None,
        };
        let out = sample(&net, &gen_cfg, &schedule, &vocab).unwrap();
        let strings: Vec<String> =
            out.iter().map(|s| detokenize(s, &vocab, false).unwrap()).collect();
        let val = validity(&strings, &vocab);
        let member = strings.iter().filter(|s| train_set.contains(*s)).count() as f64
            / strings.len() as f64;
        println!(
            "epochs={epochs} batch={batch} lr={lr} clip={clip} qk={qk_scale} gate={gate}: loss {first:.3} -> {last:.3}, \
             validity={val:.2} membership={member:.2}, train {:?} sample {:?}",
            train_time,
            t1.elapsed()
        );
        for s in strings.iter().take(6) {
            println!("  sample: {s:?}");
        }
        // High-t denoising accuracy: flow-sample near t=1, argmax p_O vs truth.
        let mut correct = 0usize;
        let mut total = 0usize;
        for (mi, seq) in seqs.iter().enumerate() {
            let padded = seq.padded_to(width, &vocab);
            for rep in 0..3u64 {
                let theta = flow_sample(
                    &padded,
                    0.98,
                    &schedule,
                    &StreamKey::new(5000 + 10 * mi as u64 + rep),
                )
                .unwrap();
                let p_o = guided_output(&net, &theta, 0.98, None, 0.0, true).unwrap();
                for (d, &id) in padded.ids().iter().enumerate() {
                    let row = p_o.grid().row(d);
                    let am = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    if am == id as usize {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
        println!("  high-t denoise accuracy: {:.3}", correct as f64 / total as f64);
        // Loss by time region (fixed t, averaged over molecules and noise reps).
        for t_fix in [0.1, 0.5, 0.9, 0.99] {
            let mut acc = 0.0;
            let mut n_acc = 0;
            for (mi, seq) in seqs.iter().enumerate() {
                let padded = seq.padded_to(width, &vocab);
                for rep in 0..2u64 {
                    let theta = flow_sample(
                        &padded,
                        t_fix,
                        &schedule,
                        &StreamKey::new(7000 + 10 * mi as u64 + rep),
                    )
                    .unwrap();
                    let p_o = guided_output(&net, &theta, t_fix, None, 0.0, true).unwrap();
                    let e_x = bfn_core::bfn::one_hot_grid(&padded, 246).unwrap();
                    acc += bfn_core::bfn::continuous_loss(&e_x, &p_o, t_fix, &schedule).unwrap();
                    n_acc += 1;
                }
            }
            println!("  loss(t={t_fix}) = {:.4}", acc / n_acc as f64);
        }
        // Gate magnitude after training (first layer).
        let idx = net.params().index_of("layer0.mod.b").unwrap();
        let m = net.params().value(idx);
        let h = net.config().hidden_dim;
        let g1: f64 = (0..h).map(|c| m.at(0, 2 * h + c).abs()).sum::<f64>() / h as f64;
        println!("  mean |gate1 bias| layer0 = {g1:.4}");
    }
}
