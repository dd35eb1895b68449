//! Temporary trajectory probe (deleted before shipping).

use std::time::Instant;

use tsvkit::attention::{init_attention_params, AttentionConfig};
use tsvkit::autodiff::ParamSet;
use tsvkit::corpus::{synthesize_utterance, ToyCorpusSpec};
use tsvkit::derive_rng;
use tsvkit::dsp::{mix_at_snr, si_sdr_samples, MixProtocol, Waveform};
use tsvkit::pipeline::extract_target;
use tsvkit::training::{run_stage, LossWeights, PoolEntry, StagePlan, TrainingPool};
use rand::Rng;

#[test]
fn probe_trajectory() {
    let spec = ToyCorpusSpec {
        speakers: 4,
        eval_speakers: 2,
        utterances_per_speaker: 16,
        duration_range: (0.8, 1.2),
        snr_range_db: (0.0, 0.0),
        train_mixtures: 1,
        eval_mixtures: 1,
        seed: 403,
    };
    let att = AttentionConfig {
        filters: 32, kernel_l1: 16, kernel_l2: 32, kernel_l3: 64,
        channels: 32, tcn_hidden: 64, tcn_kernel: 3, tcn_blocks: 4,
        tcn_stacks: 1, resnet_blocks: 1, speaker_dim: 64, speakers: 4,
    };
    let utt: Vec<Vec<Vec<f64>>> = (0..4)
        .map(|s| (0..16).map(|u| synthesize_utterance(&spec, s, u).unwrap().into_samples()).collect())
        .collect();

    let mut rng = derive_rng(spec.seed, "extraction.train-scenes");
    let mut pool = TrainingPool::default();
    for _ in 0..32 {
        let a = rng.gen_range(0..4usize);
        let b = loop { let b = rng.gen_range(0..4usize); if b != a { break b; } };
        let (ua, ub) = (rng.gen_range(0..12usize), rng.gen_range(0..12usize));
        let ur = loop { let u = rng.gen_range(0..12usize); if u != ua { break u; } };
        for proto in [MixProtocol::Max, MixProtocol::Min] {
            let (mix, tgt) = mix_at_snr(
                &Waveform::new(utt[a][ua].clone(), 8000).unwrap(),
                &Waveform::new(utt[b][ub].clone(), 8000).unwrap(),
                0.0, proto).unwrap();
            pool.mixtures.push(PoolEntry {
                observed: mix.into_samples(), target: tgt.into_samples(),
                reference: utt[a][ur].clone(), speaker: a,
            });
        }
    }
    for s in 0..4usize {
        for u in 0..12usize {
            pool.singles.push(PoolEntry {
                observed: utt[s][u].clone(), target: utt[s][u].clone(),
                reference: utt[s][(u + 1) % 12].clone(), speaker: s,
            });
        }
    }

    let mut rng = derive_rng(spec.seed, "extraction.eval-scenes");
    let mut held = Vec::new();
    for _ in 0..10 {
        let a = rng.gen_range(0..4usize);
        let b = loop { let b = rng.gen_range(0..4usize); if b != a { break b; } };
        let (ua, ub) = (rng.gen_range(12..16usize), rng.gen_range(12..16usize));
        let ur = loop { let u = rng.gen_range(12..16usize); if u != ua { break u; } };
        for proto in [MixProtocol::Max, MixProtocol::Min] {
            let (mix, tgt) = mix_at_snr(
                &Waveform::new(utt[a][ua].clone(), 8000).unwrap(),
                &Waveform::new(utt[b][ub].clone(), 8000).unwrap(),
                0.0, proto).unwrap();
            held.push((mix.into_samples(), tgt.into_samples(), utt[a][ur].clone()));
        }
    }

    let mut params = ParamSet::new();
    init_attention_params(&att, &mut derive_rng(spec.seed, "attention-init"), &mut params).unwrap();
    let w = LossWeights::standard();

    let measure_mix = |params: &ParamSet| {
        let (mut si_in, mut si_out) = (0.0, 0.0);
        for (mix, tgt, reference) in &held {
            let est = extract_target(params, &att, mix, reference).unwrap();
            si_in += si_sdr_samples(mix, tgt).unwrap();
            si_out += si_sdr_samples(&est, tgt).unwrap();
        }
        (si_out - si_in) / held.len() as f64
    };
    let measure_singles = |params: &ParamSet| {
        let mut acc = 0.0;
        let mut acc_trim = 0.0;
        let mut n = 0.0;
        for s in 0..4usize {
            for u in 13..16usize {
                let est = extract_target(params, &att, &utt[s][u], &utt[s][12]).unwrap();
                acc += si_sdr_samples(&est, &utt[s][u]).unwrap();
                let m = 160;
                let len = est.len();
                acc_trim += si_sdr_samples(&est[m..len - m], &utt[s][u][m..len - m]).unwrap();
                n += 1.0;
            }
        }
        (acc / n, acc_trim / n)
    };

    // Continuous schedule, exactly as the pinned run will execute it:
    // one pretrain call, one fine-tune call (Adam state and the plateau
    // schedule persist across all epochs of each call).
    let t = Instant::now();
    let plan = StagePlan::stage1_pretrain(60, 8, 6400, w);
    let out = run_stage(&mut params, &att, None, &pool, &plan, spec.seed).unwrap();
    let (sf, st) = measure_singles(&params);
    println!(
        "pre  60: loss {:>7.2} lr {:.1e}  gain {:>6.2} dB  singles {:>6.2} dB (trim {:>6.2})  ({:.0?})",
        out.epoch_losses.last().unwrap(), out.final_lr,
        measure_mix(&params), sf, st, t.elapsed()
    );
    let plan = StagePlan::stage1_finetune(200, 8, 6400, w, 60);
    let out = run_stage(&mut params, &att, None, &pool, &plan, spec.seed).unwrap();
    let (sf, st) = measure_singles(&params);
    println!(
        "ft  200: loss {:>7.2} lr {:.1e}  gain {:>6.2} dB  singles {:>6.2} dB (trim {:>6.2})  ({:.0?})",
        out.epoch_losses.last().unwrap(), out.final_lr,
        measure_mix(&params), sf, st, t.elapsed()
    );
}
