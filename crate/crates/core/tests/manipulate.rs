mod common;

use common::{random_sentence, tiny_config, ConstNoise};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sentvae::manipulate::{
    ancestral_generate, conditional_priors, encode_sentence_latents, generate_batch, greedy_generate,
    resample_single_lv, resample_with_priors, sample_prior_chain, swap_lv, Decoding, EncodeMode, LatentAssignment,
    Provenance,
};
use sentvae::corpus::{BOS, EOS};
use sentvae::model::{HierarchicalVae, ModelConfig, SeededNoise, ZeroNoise};
use sentvae::params::ParameterStore;
use sentvae::Error;

fn lively() -> (HierarchicalVae, ParameterStore<f64>) {
    let cfg = ModelConfig {
        init_std: 0.3,
        ..tiny_config(12)
    };
    HierarchicalVae::build::<f64>(&cfg).unwrap()
}

fn changed_lvs(a: &LatentAssignment, b: &LatentAssignment) -> Vec<usize> {
    (0..a.len()).filter(|&i| a.lv(i) != b.lv(i)).collect()
}

#[test]
fn resampling_touches_only_the_chosen_lv() {
    let (model, params) = lively();
    let base = sample_prior_chain(&model, &params, &mut SeededNoise::new(1)).unwrap();
    assert_eq!(base.len(), 6);
    for lv in 0..base.len() {
        let out = resample_single_lv(&model, &params, &base, lv, &mut SeededNoise::new(40 + lv as u64), false).unwrap();
        assert_eq!(changed_lvs(&base, &out), vec![lv]);
        assert_eq!(out.provenance[lv], Provenance::Resampled);
        for i in (0..base.len()).filter(|&i| i != lv) {
            assert_eq!(out.provenance[i], Provenance::PriorSampled);
        }
    }
}

#[test]
fn repropagation_redraws_every_deeper_level() {
    let (model, params) = lively();
    let base = sample_prior_chain(&model, &params, &mut SeededNoise::new(2)).unwrap();
    let out = resample_single_lv(&model, &params, &base, 1, &mut SeededNoise::new(3), true).unwrap();
    assert_eq!(changed_lvs(&base, &out), vec![1, 2, 3, 4, 5]);
    let out = resample_single_lv(&model, &params, &base, 2, &mut SeededNoise::new(3), true).unwrap();
    assert_eq!(changed_lvs(&base, &out), vec![2, 4, 5]);
    let out = resample_single_lv(&model, &params, &base, 5, &mut SeededNoise::new(3), true).unwrap();
    assert_eq!(changed_lvs(&base, &out), vec![5]);
}

#[test]
fn zero_noise_resample_returns_the_conditional_prior_mean() {
    let (model, params) = lively();
    let base = sample_prior_chain(&model, &params, &mut SeededNoise::new(4)).unwrap();
    let priors = conditional_priors(&model, &params, &base).unwrap();
    for lv in 0..base.len() {
        let out = resample_with_priors(&base, &priors, lv, &mut ZeroNoise).unwrap();
        let direct = resample_single_lv(&model, &params, &base, lv, &mut ZeroNoise, false).unwrap();
        assert_eq!(out, direct);
        let (k, i) = base.locate(lv).unwrap();
        let want: Vec<f64> = match k {
            0 => vec![0.0; base.z_size],
            1 => priors.level2.means.row(i).to_vec(),
            _ => priors.level3.means.row(i).to_vec(),
        };
        assert_eq!(out.lv(lv), &want[..]);
    }
    // ε = 1 lands one standard deviation above the mean.
    let out = resample_with_priors(&base, &priors, 3, &mut ConstNoise(1.0)).unwrap();
    let (_, i) = base.locate(3).unwrap();
    for c in 0..base.z_size {
        let want = priors.level2.means.get(i, c) + priors.level2.stds.get(i, c);
        assert!((out.lv(3)[c] - want).abs() < 1e-12);
    }
}

#[test]
fn resamples_with_fresh_noise_differ() {
    let (model, params) = lively();
    let base = sample_prior_chain(&model, &params, &mut SeededNoise::new(5)).unwrap();
    let mut noise = SeededNoise::new(6);
    let draws: Vec<LatentAssignment> = (0..5)
        .map(|_| resample_single_lv(&model, &params, &base, 4, &mut noise, false).unwrap())
        .collect();
    for i in 0..draws.len() {
        for j in i + 1..draws.len() {
            assert_ne!(draws[i].lv(4), draws[j].lv(4));
        }
    }
}

#[test]
fn resample_rejects_bad_indices_and_layouts() {
    let (model, params) = lively();
    let base = sample_prior_chain(&model, &params, &mut SeededNoise::new(7)).unwrap();
    assert!(matches!(
        resample_single_lv(&model, &params, &base, 6, &mut ZeroNoise, false),
        Err(Error::Index { index: 6, limit: 6, .. })
    ));
    let other = LatentAssignment::new([1, 1, 1], 2, vec![0.0; 6], vec![Provenance::PriorSampled; 3]).unwrap();
    assert!(matches!(
        resample_single_lv(&model, &params, &other, 0, &mut ZeroNoise, false),
        Err(Error::Domain(_))
    ));
}

#[test]
fn swap_is_an_involution_and_local() {
    let (model, params) = lively();
    let a = sample_prior_chain(&model, &params, &mut SeededNoise::new(8)).unwrap();
    let b = sample_prior_chain(&model, &params, &mut SeededNoise::new(9)).unwrap();
    for lv in 0..a.len() {
        let (a2, b2) = swap_lv(&a, &b, lv).unwrap();
        assert_eq!(a2.lv(lv), b.lv(lv));
        assert_eq!(b2.lv(lv), a.lv(lv));
        assert_eq!(changed_lvs(&a, &a2), vec![lv]);
        assert_eq!(changed_lvs(&b, &b2), vec![lv]);
        assert_eq!(a2.provenance[lv], Provenance::Swapped);
        let (a3, b3) = swap_lv(&a2, &b2, lv).unwrap();
        assert_eq!(a3.values, a.values);
        assert_eq!(b3.values, b.values);
    }
    let (a2, b2) = swap_lv(&a, &a, 2).unwrap();
    assert_eq!((&a2, &b2), (&a, &a));
    assert!(matches!(swap_lv(&a, &b, 6), Err(Error::Index { .. })));
    let small = LatentAssignment::new([1, 1, 1], 2, vec![0.0; 6], vec![Provenance::PriorSampled; 3]).unwrap();
    assert!(matches!(swap_lv(&a, &small, 0), Err(Error::Domain(_))));
}

#[test]
fn greedy_decoding_is_deterministic_and_well_formed() {
    let (model, params) = lively();
    for seed in 0..10 {
        let z = sample_prior_chain(&model, &params, &mut SeededNoise::new(seed)).unwrap();
        let g1 = greedy_generate(&model, &params, &z, 16).unwrap();
        let g2 = greedy_generate(&model, &params, &z, 16).unwrap();
        assert_eq!(g1, g2);
        let ids = g1.tokens.ids();
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert!(ids.len() <= 16);
        assert!(ids[1..ids.len() - 1].iter().all(|&i| i > EOS));
        if !g1.truncated {
            assert_eq!(ids.iter().filter(|&&i| i == EOS).count(), 1);
        }
    }
}

#[test]
fn short_limits_truncate_with_a_flag() {
    let (model, params) = lively();
    let z = sample_prior_chain(&model, &params, &mut SeededNoise::new(3)).unwrap();
    let g = greedy_generate(&model, &params, &z, 2).unwrap();
    assert_eq!(g.tokens.ids(), &[BOS, EOS]);
    assert!(g.truncated);
    assert!(matches!(greedy_generate(&model, &params, &z, 1), Err(Error::Domain(_))));
}

#[test]
fn low_temperature_sampling_matches_greedy() {
    let (model, params) = lively();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..10 {
        let z = sample_prior_chain(&model, &params, &mut SeededNoise::new(100 + seed)).unwrap();
        let greedy = greedy_generate(&model, &params, &z, 16).unwrap();
        assert_eq!(ancestral_generate(&model, &params, &z, 16, 0.0, &mut rng).unwrap(), greedy);
        assert_eq!(ancestral_generate(&model, &params, &z, 16, 1e-9, &mut rng).unwrap(), greedy);
    }
    let z = sample_prior_chain(&model, &params, &mut SeededNoise::new(0)).unwrap();
    assert!(ancestral_generate(&model, &params, &z, 16, -1.0, &mut rng).is_err());
    assert!(ancestral_generate(&model, &params, &z, 16, f64::NAN, &mut rng).is_err());
}

#[test]
fn batched_generation_matches_one_at_a_time() {
    let (model, params) = lively();
    let zs: Vec<LatentAssignment> = (0..6)
        .map(|s| sample_prior_chain(&model, &params, &mut SeededNoise::new(200 + s)).unwrap())
        .collect();
    let refs: Vec<&LatentAssignment> = zs.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = generate_batch(&model, &params, &refs, 16, Decoding::Greedy, &mut rng).unwrap();
    for (z, got) in zs.iter().zip(&batch) {
        assert_eq!(got, &greedy_generate(&model, &params, z, 16).unwrap());
    }
    assert!(generate_batch(&model, &params, &[], 16, Decoding::Greedy, &mut rng).unwrap().is_empty());
}

#[test]
fn ancestral_sampling_is_reproducible_per_seed() {
    let (model, params) = lively();
    let z = sample_prior_chain(&model, &params, &mut SeededNoise::new(1)).unwrap();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20)
            .map(|_| ancestral_generate(&model, &params, &z, 16, 1.0, &mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    let a = draw(5);
    assert_eq!(a, draw(5));
    assert!(a.iter().any(|g| g != &a[0]));
}

#[test]
fn top_level_prior_draws_are_standard_normal() {
    let (model, params) = lively();
    let mut noise = SeededNoise::new(77);
    let n = 10_000;
    let mut sum = vec![0.0; 2 * 2];
    let mut sq = vec![0.0; 2 * 2];
    for _ in 0..n {
        let a = sample_prior_chain(&model, &params, &mut noise).unwrap();
        for (i, v) in a.values[..4].iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    for i in 0..4 {
        let mean = sum[i] / n as f64;
        let var = sq[i] / n as f64 - mean * mean;
        assert!(mean.abs() <= 0.05, "coordinate {i} mean {mean}");
        assert!((var - 1.0).abs() <= 0.05, "coordinate {i} variance {var}");
    }
}

#[test]
fn encoding_means_are_deterministic_and_samples_are_not() {
    let (model, params) = lively();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_sentence(&mut rng, 20, 6);
    let m1 = encode_sentence_latents(&model, &params, &x, EncodeMode::Mean, &mut SeededNoise::new(1)).unwrap();
    let m2 = encode_sentence_latents(&model, &params, &x, EncodeMode::Mean, &mut SeededNoise::new(2)).unwrap();
    assert_eq!(m1, m2);
    assert!(m1.provenance.iter().all(|&p| p == Provenance::PosteriorEncoded));
    let s0 = encode_sentence_latents(&model, &params, &x, EncodeMode::Sample, &mut ZeroNoise).unwrap();
    assert_eq!(s0.values, m1.values);
    let s1 = encode_sentence_latents(&model, &params, &x, EncodeMode::Sample, &mut SeededNoise::new(1)).unwrap();
    assert_ne!(s1.values, m1.values);
}

#[test]
fn assignments_round_trip_through_json() {
    let (model, params) = lively();
    let a = sample_prior_chain(&model, &params, &mut SeededNoise::new(11)).unwrap();
    let (a, _) = swap_lv(&a, &sample_prior_chain(&model, &params, &mut SeededNoise::new(12)).unwrap(), 1).unwrap();
    let text = a.to_json_string();
    assert!(text.contains("\"swapped\"") || text.contains("\"prior-sampled\""));
    assert_eq!(LatentAssignment::from_json_str(&text).unwrap(), a);
    assert!(a.matches(model.config()));
}

#[test]
fn malformed_assignments_are_rejected() {
    assert!(LatentAssignment::new([1, 1, 1], 2, vec![0.0; 5], vec![Provenance::Swapped; 3]).is_err());
    assert!(LatentAssignment::new([1, 0, 1], 2, vec![0.0; 4], vec![Provenance::Swapped; 2]).is_err());
    assert!(LatentAssignment::new([1, 1, 1], 2, vec![f64::NAN; 6], vec![Provenance::Swapped; 3]).is_err());
    for text in [
        "",
        "{}",
        r#"{"levels":[1,1,1],"z_size":1,"values":[0,0,0],"provenance":["resampled","resampled"]}"#,
        r#"{"levels":[1,1,1],"z_size":1,"values":[0,0,0],"provenance":["r","r","r"]}"#,
        r#"{"levels":[1,1,1],"z_size":1,"values":[0,0,0],"provenance":["swapped","swapped","swapped"],"x":1}"#,
    ] {
        assert!(LatentAssignment::from_json_str(text).is_err(), "{text}");
    }
    let ok = r#"{"levels":[1,1,1],"z_size":1,"values":[0,0.5,-1],"provenance":["swapped","resampled","posterior-encoded"]}"#;
    let a = LatentAssignment::from_json_str(ok).unwrap();
    assert_eq!(a.locate(2).unwrap(), (2, 0));
}
