//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured values (run with `--nocapture` to see them
//! for passing tests).

use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use latentmark::attacks::{self, AttackConfig, AttackKind};
use latentmark::backend::{Backend, BackendConfig, BackendKind, Latent, PromptContext};
use latentmark::codec::{CodecConfig, Image, ToyCodec};
use latentmark::eval::{self, CellSpec, DistortionSpec, MatrixTuning, ScoreSet};
use latentmark::freq::{self, Offset};
use latentmark::pipeline::{
    one_sided_statistic, two_sided_statistic, Pipeline, SchemeConfig, Side,
};
use latentmark::rng;
use latentmark::runtime::{
    batch_contexts, build_pipeline, cmd_evaluate, EvaluateMode, KeyFile, RunConfig,
    SelectorFile,
};
use latentmark::selector::{self, MappingConfig, SelectorModel};

struct Lab {
    cfg: RunConfig,
    key: KeyFile,
    pipeline: Pipeline,
    model: SelectorModel,
    /// 64 (plain, watermarked, params) triples under the dynamic scheme.
    pairs: Vec<(Image, Image, latentmark::pipeline::InjectionParams)>,
    pos_scores: Vec<f64>,
    neg_scores: Vec<f64>,
}

static LAB: OnceLock<Lab> = OnceLock::new();

fn lab() -> &'static Lab {
    LAB.get_or_init(|| {
        let cfg = RunConfig::toy_defaults();
        let key = KeyFile::derive(cfg.seed, &cfg.mapping);
        let pipeline = build_pipeline(&cfg, &key).expect("pipeline");
        let contexts = batch_contexts(cfg.seed, 64);
        let corpus: Vec<Image> = contexts
            .iter()
            .map(|ctx| pipeline.generate_plain(ctx).expect("plain"))
            .collect();
        let features: Vec<_> = corpus.iter().map(selector::encode_features).collect();
        let mut model = selector::train_selector(
            &features,
            &cfg.mapping,
            &key.secret().expect("secret"),
            cfg.classifier,
            cfg.seed,
        )
        .expect("training");
        model.key_fingerprint = key.fingerprint.clone();

        let scheme = SchemeConfig::ists();
        let mut pairs = Vec::with_capacity(64);
        for (ctx, plain) in contexts.iter().zip(corpus.into_iter()) {
            let (marked, params) = pipeline
                .generate_watermarked(ctx, Some(&model), &scheme)
                .expect("watermarked");
            pairs.push((plain, marked, params));
        }
        let det = PromptContext::new("", 0);
        let pos_scores: Vec<f64> = pairs
            .iter()
            .map(|(_, m, _)| pipeline.score(&det, m, Some(&model), &scheme).unwrap().0)
            .collect();
        let neg_scores: Vec<f64> = pairs
            .iter()
            .map(|(p, _, _)| pipeline.score(&det, p, Some(&model), &scheme).unwrap().0)
            .collect();
        Lab {
            cfg,
            key,
            pipeline,
            model,
            pairs,
            pos_scores,
            neg_scores,
        }
    })
}

fn random_latent(cfg: &BackendConfig, t: usize, seed: u64) -> Latent {
    let mut rng = rng::rng_for(seed, "acceptance", 0);
    Latent::new(
        Array3::from_shape_simple_fn((cfg.channels, cfg.height, cfg.width), || {
            rng.sample::<f64, _>(StandardNormal)
        }),
        t,
    )
}

fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn criterion_01_exact_inversion_roundtrip() {
    let started = Instant::now();
    let ctx = PromptContext::new("inversion", 1);
    let mut worst = 0.0f64;
    for kind in [BackendKind::ToyScale, BackendKind::ToyLinear] {
        let cfg = BackendConfig::toy_small(kind);
        assert_eq!(cfg.schedule.total_steps(), 50);
        let backend = Backend::new(cfg.clone()).unwrap();
        for i in 0..200 {
            let z = random_latent(&cfg, 50, 1000 + i);
            let down = backend.denoise(&ctx, &z, 0).unwrap();
            let back = backend.invert(&ctx, &down, 50).unwrap();
            worst = worst.max(max_abs_diff(&z.data, &back.data));
        }
    }
    let elapsed = started.elapsed();
    assert!(worst < 1e-5, "round-trip error {worst}");
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!("[criterion 01] PASS exact inversion: max abs error {worst:.3e} over 2x200 latents in {elapsed:.2?}");
}

#[test]
fn criterion_02_injection_extraction_identity() {
    // A real plane's spectrum is Hermitian, so literal replacement of an
    // asymmetric band cannot survive in a real latent; injection writes the
    // Hermitian completion of the pattern (first cell of each mirror pair
    // sources both). This test pins that strongest attainable form: exact
    // recovery of the completion everywhere, exact recovery of the pattern
    // itself wherever the mirror falls outside the mask, and locality
    // outside the written support.
    let l = lab();
    let cfg = l.cfg.backend.clone();
    let (h, w) = (cfg.height, cfg.width);
    let (pattern0, mask0) = l.pipeline.base_pattern();
    let mut rng = rng::rng_for(7, "criterion2", 0);
    let mut offsets: Vec<Offset> = vec![
        Offset::new(12, 12),
        Offset::new(-12, 12),
        Offset::new(12, -12),
        Offset::new(-12, -12),
        Offset::ZERO,
    ];
    while offsets.len() < 100 {
        offsets.push(Offset::new(rng.gen_range(-12..=12), rng.gen_range(-12..=12)));
    }
    let mut worst_completion = 0.0f64;
    let mut worst_pattern = 0.0f64;
    let mut worst_locality = 0.0f64;
    let mut n_verbatim = 0usize;
    for (i, &l_off) in offsets.iter().enumerate() {
        let z = random_latent(&cfg, 15, 2000 + i as u64);
        let (p, m) = freq::offset_pattern(pattern0, mask0, l_off).unwrap();
        let marked = freq::inject(&z, &p, &m).unwrap();
        let got = freq::extract(&marked, &m).unwrap();
        // Independent completion oracle.
        let mut oracle = Array2::from_elem((h, w), None::<Complex64>);
        for cell in m.cells() {
            if oracle[cell].is_some() {
                continue;
            }
            let v = p.value_at(cell).unwrap();
            let mirror = latentmark::fft::mirror_index((h, w), cell);
            if mirror == cell {
                oracle[cell] = Some(Complex64::new(v.re, 0.0));
            } else {
                oracle[cell] = Some(v);
                oracle[mirror] = Some(v.conj());
            }
        }
        for (k, cell) in m.cells().into_iter().enumerate() {
            worst_completion = worst_completion.max((got[k] - oracle[cell].unwrap()).norm());
            let mirror = latentmark::fft::mirror_index((h, w), cell);
            if !m.support[mirror] {
                worst_pattern = worst_pattern.max((got[k] - p.value_at(cell).unwrap()).norm());
                n_verbatim += 1;
            }
        }
        // Locality outside the written support.
        let written = freq::written_support(&m);
        let before =
            latentmark::fft::fft2_centered(&z.data.index_axis(ndarray::Axis(0), 0).to_owned());
        let after = latentmark::fft::fft2_centered(
            &marked.data.index_axis(ndarray::Axis(0), 0).to_owned(),
        );
        for ((r, c), &wrote) in written.indexed_iter() {
            if !wrote {
                worst_locality = worst_locality.max((before[(r, c)] - after[(r, c)]).norm());
            }
        }
    }
    assert!(worst_completion < 1e-6, "completion error {worst_completion}");
    assert!(worst_pattern < 1e-6, "verbatim-cell error {worst_pattern}");
    assert!(worst_locality < 1e-6, "locality error {worst_locality}");
    assert!(n_verbatim > 0);
    println!(
        "[criterion 02] PASS injection/extraction identity: completion err {worst_completion:.3e}, \
         verbatim err {worst_pattern:.3e} over {n_verbatim} asymmetric cells, locality err {worst_locality:.3e}"
    );
}

#[test]
fn criterion_03_two_sided_statistic_properties() {
    let mut rng = rng::rng_for(3, "criterion3", 0);
    for trial in 0..50 {
        let n = 16 + trial % 32;
        let w: Vec<Complex64> = (0..n)
            .map(|_| {
                Complex64::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                )
            })
            .collect();
        let s: Vec<Complex64> = (0..n)
            .map(|_| {
                Complex64::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                )
            })
            .collect();
        let neg: Vec<Complex64> = s.iter().map(|&v| -v).collect();
        // Exact sign symmetry.
        assert_eq!(
            two_sided_statistic(&w, &s, false).0,
            two_sided_statistic(&w, &neg, false).0
        );
        // Two-sided never exceeds one-sided.
        assert!(two_sided_statistic(&w, &s, false).0 <= one_sided_statistic(&w, &s, false));
        // Sign-flipped pattern: two-sided collapses to zero, one-sided to
        // exactly twice the mean pattern modulus.
        let flipped: Vec<Complex64> = w.iter().map(|&v| -v).collect();
        let (d_two, side) = two_sided_statistic(&w, &flipped, false);
        assert_eq!(d_two, 0.0);
        assert_eq!(side, Side::Minus);
        let mean_mod = w.iter().map(|v| v.norm()).sum::<f64>() / n as f64;
        assert_eq!(one_sided_statistic(&w, &flipped, false), 2.0 * mean_mod);
    }
    println!("[criterion 03] PASS two-sided statistic identities (exact, 50 trials)");
}

#[test]
fn criterion_04_mapping_arithmetic_oracle() {
    let cfg = MappingConfig::paper_defaults();
    for y in 0..1024usize {
        let got = selector::map_params(y, &cfg);
        // Independent oracle: direct integer arithmetic.
        let yi = y as i64;
        let t = 10 + (yi % 10);
        let l_x = -12 + (yi % 24);
        let l_y = -12 + ((yi / 24) % 24);
        assert_eq!(got.t as i64, t, "t mismatch at y={y}");
        assert_eq!(got.offset.l_x as i64, l_x, "l_x mismatch at y={y}");
        assert_eq!(got.offset.l_y as i64, l_y, "l_y mismatch at y={y}");
    }
    println!("[criterion 04] PASS mapping arithmetic: exact match for all y in [0, 1024)");
}

#[test]
fn criterion_05_metric_oracles() {
    let mut rng = rng::rng_for(5, "criterion5", 0);
    for _ in 0..50 {
        let np = rng.gen_range(1..=20);
        let nn = rng.gen_range(2..=20);
        let draw =
            |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(0..12) as f64 / 2.0).collect()
            };
        let scores = ScoreSet::new(draw(&mut rng, np), draw(&mut rng, nn));

        // AUC against exhaustive pair counting.
        let mut wins = 0.0;
        for &p in &scores.positives {
            for &n in &scores.negatives {
                if p < n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        let oracle_auc = wins / (np * nn) as f64;
        assert_eq!(eval::auc(&scores).unwrap(), oracle_auc);

        // TPR against an exhaustive threshold sweep over the candidate set.
        for fpr in [0.01, 0.1, 0.3, 0.5, 1.0] {
            let mut best_tpr = 0.0f64;
            let mut candidates: Vec<f64> = scores.negatives.clone();
            candidates.push(f64::INFINITY);
            for &tau in &candidates {
                let emp_fpr = scores.negatives.iter().filter(|&&v| v < tau).count() as f64
                    / nn as f64;
                if emp_fpr <= fpr {
                    let tpr = scores.positives.iter().filter(|&&v| v < tau).count() as f64
                        / np as f64;
                    best_tpr = best_tpr.max(tpr);
                }
            }
            assert_eq!(
                eval::tpr_at_fpr(&scores, fpr).unwrap(),
                best_tpr,
                "fpr {fpr}"
            );
        }
    }
    println!("[criterion 05] PASS metric oracles: AUC and TPR exact over 50 random score sets");
}

#[test]
fn criterion_06_no_attack_detection() {
    let started = Instant::now();
    let l = lab();
    let scores = ScoreSet::new(l.pos_scores.clone(), l.neg_scores.clone());
    let auc = eval::auc(&scores).unwrap();
    let tpr = eval::tpr_at_fpr(&scores, 0.01).unwrap();
    let elapsed = started.elapsed();
    assert!(auc >= 0.99, "no-attack AUC {auc}");
    assert!(tpr >= 0.95, "no-attack TPR@1%FPR {tpr}");
    assert!(elapsed.as_secs_f64() < 600.0);
    println!(
        "[criterion 06] PASS no-attack detection: AUC {auc:.4}, TPR@1%FPR {tpr:.2} over 64 pairs (C=64)"
    );
}

#[test]
fn criterion_07_selector_consistency() {
    let l = lab();
    let agree = l
        .pairs
        .iter()
        .filter(|(plain, marked, _)| {
            selector::select(&l.model, plain) == selector::select(&l.model, marked)
        })
        .count();
    let rate = agree as f64 / l.pairs.len() as f64;
    assert!(rate >= 0.95, "plain/watermarked agreement {rate}");
    println!(
        "[criterion 07] PASS selector consistency: {agree}/{} paired parameter agreement",
        l.pairs.len()
    );
}

#[test]
fn criterion_08_two_sided_beats_one_sided_under_removal() {
    let started = Instant::now();
    let l = lab();
    let tuning = MatrixTuning::default();

    // Imprint removal on the dynamic suite, identical seeds for both
    // detector variants.
    let cell = |scheme_name: &str, scheme: SchemeConfig| CellSpec {
        scheme_name: scheme_name.into(),
        scheme,
        attack: Some(AttackKind::ImpRemoval),
        distortion: None,
    };
    let two = eval::run_cell(
        &l.pipeline,
        Some(&l.model),
        &cell("ists", SchemeConfig::ists()),
        64,
        l.cfg.seed,
        &tuning,
    )
    .unwrap();
    let one = eval::run_cell(
        &l.pipeline,
        Some(&l.model),
        &cell("one-sided", SchemeConfig::one_sided()),
        64,
        l.cfg.seed,
        &tuning,
    )
    .unwrap();
    assert!(
        two.auc >= one.auc,
        "two-sided {} vs one-sided {}",
        two.auc,
        one.auc
    );

    // Sign-flip oracle attack, isolated on the static configuration (the
    // flip reverses all semantics, so any dynamic selector mis-selects on
    // it by construction; the clause targets the detector property).
    let mut sym_cfg = l.cfg.clone();
    sym_cfg.pattern.conjugate_symmetric = true;
    let pipeline = build_pipeline(&sym_cfg, &l.key).unwrap();
    let one_scheme = SchemeConfig::tree_ring();
    let two_scheme = SchemeConfig {
        two_sided: true,
        ..SchemeConfig::tree_ring()
    };
    let det = PromptContext::new("", 0);
    let mut flip_one = Vec::new();
    let mut flip_two = Vec::new();
    let mut ben_one = Vec::new();
    let mut ben_two = Vec::new();
    for ctx in batch_contexts(sym_cfg.seed, 64) {
        let plain = pipeline.generate_plain(&ctx).unwrap();
        let (marked, _) = pipeline.generate_watermarked(&ctx, None, &one_scheme).unwrap();
        let flipped = attacks::latent_sign_flip(&pipeline, &marked).unwrap();
        flip_one.push(pipeline.score(&det, &flipped, None, &one_scheme).unwrap().0);
        flip_two.push(pipeline.score(&det, &flipped, None, &two_scheme).unwrap().0);
        ben_one.push(pipeline.score(&det, &plain, None, &one_scheme).unwrap().0);
        ben_two.push(pipeline.score(&det, &plain, None, &two_scheme).unwrap().0);
    }
    let auc_one = eval::auc(&ScoreSet::new(flip_one, ben_one)).unwrap();
    let auc_two = eval::auc(&ScoreSet::new(flip_two, ben_two)).unwrap();
    let elapsed = started.elapsed();
    assert!(auc_one < 0.2, "one-sided AUC under sign flip {auc_one}");
    assert!(auc_two >= 0.9, "two-sided AUC under sign flip {auc_two}");
    assert!(elapsed.as_secs_f64() < 1800.0);
    println!(
        "[criterion 08] PASS detector comparison: imp-removal AUC two-sided {:.4} >= one-sided {:.4}; \
         sign-flip oracle AUC one-sided {auc_one:.4} / two-sided {auc_two:.4} ({elapsed:.2?})",
        two.auc, one.auc
    );
}

#[test]
fn criterion_09_dynamic_offsets_cancel_the_average_residual() {
    let l = lab();
    let det_scheme_energy = |scheme: SchemeConfig| -> f64 {
        let contexts = batch_contexts(l.cfg.seed, 64);
        let mut plains = Vec::new();
        let mut marked = Vec::new();
        for ctx in &contexts {
            plains.push(l.pipeline.generate_plain(ctx).unwrap());
            marked.push(
                l.pipeline
                    .generate_watermarked(ctx, Some(&l.model), &scheme)
                    .unwrap()
                    .0,
            );
        }
        let residual = attacks::avg_residual(&marked, &plains).unwrap();
        let z = l.pipeline.codec().encode_linear(&residual);
        let spec =
            latentmark::fft::fft2_centered(&z.index_axis(ndarray::Axis(0), 0).to_owned());
        let (_, mask) = l.pipeline.base_pattern();
        mask.cells().into_iter().map(|c| spec[c].norm_sqr()).sum()
    };
    let dynamic = det_scheme_energy(SchemeConfig::ists());
    let static_full = det_scheme_energy(SchemeConfig::tree_ring());
    let static_offsets = det_scheme_energy(SchemeConfig::without_dynamic_pattern());
    assert!(
        static_full >= 2.0 * dynamic,
        "static {static_full} vs dynamic {dynamic}"
    );
    assert!(
        static_offsets >= 2.0 * dynamic,
        "fixed-offset {static_offsets} vs dynamic {dynamic}"
    );
    println!(
        "[criterion 09] PASS residual cancellation: mask energy static/dynamic = {:.1}x \
         (fixed-offset variant {:.1}x)",
        static_full / dynamic,
        static_offsets / dynamic
    );
}

#[test]
fn criterion_10_attack_descent_matches_closed_form_optima() {
    // Small toy-linear surrogate so the operators are materializable.
    let backend_cfg = BackendConfig {
        kind: BackendKind::ToyLinear,
        channels: 2,
        height: 8,
        width: 8,
        schedule: latentmark::backend::NoiseSchedule::linear(50, 0.01).unwrap(),
        linear_op_seed: 17,
        adapter: None,
    };
    let backend = Backend::new(backend_cfg.clone()).unwrap();
    let codec = ToyCodec::new(
        CodecConfig {
            seed: 11,
            gain: 0.1 / 9.0,
            upsample: 2,
        },
        2,
        (8, 8),
    )
    .unwrap();
    let (pattern, mask) = freq::make_ring_pattern(3, 2, (8, 8), 0, 12.0, false).unwrap();
    let pipeline = Pipeline::new(backend, codec, pattern, mask).unwrap();
    let ctx = PromptContext::new("closed-form", 9);
    let marked = pipeline
        .generate_watermarked(&ctx, None, &SchemeConfig::tree_ring())
        .unwrap()
        .0;

    // --- Imprint removal: minimize 0.5 |A(z0 + d) + A z0|^2 over d.
    let latent_dim = 2 * 8 * 8;
    let t_total = pipeline.backend().total_steps();
    let apply_inv = |v: &Array3<f64>| {
        pipeline
            .backend()
            .invert(&ctx, &Latent::new(v.clone(), 0), t_total)
            .unwrap()
            .data
    };
    let mut a = nalgebra::DMatrix::<f64>::zeros(latent_dim, latent_dim);
    for k in 0..latent_dim {
        let mut basis = Array3::zeros((2, 8, 8));
        basis.as_slice_mut().unwrap()[k] = 1.0;
        let col = apply_inv(&basis);
        for (r, v) in col.iter().enumerate() {
            a[(r, k)] = *v;
        }
    }
    let z0 = pipeline.codec().encode(&marked).unwrap();
    let z0_vec = nalgebra::DVector::from_iterator(latent_dim, z0.data.iter().copied());
    let c = &a * &z0_vec * 2.0; // A z0 + A z0
    // Normal equations: A^T A d = -A^T c.
    let ata = a.transpose() * &a;
    let rhs = -(a.transpose() * &c);
    let delta_star = ata.clone().lu().solve(&rhs).expect("solvable");

    let sigma = attacks::operator_norm_estimate(
        apply_inv,
        |v| pipeline.backend().invert_adjoint(&ctx, v, t_total).unwrap(),
        (2, 8, 8),
        60,
        1,
    );
    // The 50-step inversion chain compounds the kernel's per-step spread
    // into a sizable condition number; plain gradient descent needs many
    // iterations to pin the slowest Fourier mode at 1e-3.
    let cfg_imp = AttackConfig {
        kind: AttackKind::ImpRemoval,
        steps: 30_000,
        lr: attacks::convergent_lr(sigma, 0.0),
        lambda: 0.0,
        n_pairs: 1,
    };
    let out = attacks::imp_removal(&pipeline, &ctx, &marked, &cfg_imp).unwrap();
    assert!(
        *out.loss_trace.last().unwrap() < 1e-9 * out.loss_trace[0],
        "imp descent did not converge: {:?} -> {:?}",
        out.loss_trace[0],
        out.loss_trace.last()
    );
    for pair in out.loss_trace.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-6, "imp loss increased: {pair:?}");
    }
    // Recover delta from the attacked latent (decode clamps, so compare in
    // latent space through the unclamped encode of the attack's own state).
    let attacked_z0 = pipeline.codec().encode(&out.attacked_image).unwrap();
    let delta_gd = &attacked_z0.data - &z0.data;
    let mut worst = 0.0f64;
    for (k, v) in delta_gd.iter().enumerate() {
        worst = worst.max((v - delta_star[k]).abs());
    }
    assert!(worst < 1e-3, "imp removal vs closed form: {worst}");

    // --- Encoder-space removal with ridge lambda.
    let img_shape = pipeline.codec().image_shape((8, 8));
    let img_dim = img_shape.0 * img_shape.1 * img_shape.2;
    let mut e = nalgebra::DMatrix::<f64>::zeros(latent_dim, img_dim);
    for k in 0..img_dim {
        let mut basis = Array3::zeros(img_shape);
        basis.as_slice_mut().unwrap()[k] = 1.0;
        let col = pipeline.codec().encode_linear(&basis);
        for (r, v) in col.iter().enumerate() {
            e[(r, k)] = *v;
        }
    }
    let sigma_e = attacks::operator_norm_estimate(
        |d| pipeline.codec().encode_linear(d),
        |v| pipeline.codec().encode_adjoint(v),
        img_shape,
        60,
        2,
    );
    let lambda = 0.5 * sigma_e * sigma_e;
    let mean = marked.sum() / marked.len() as f64;
    let diff = &marked - &Array3::from_elem(marked.raw_dim(), mean);
    let c_vec = {
        let enc = pipeline.codec().encode_linear(&diff);
        nalgebra::DVector::from_iterator(latent_dim, enc.iter().copied())
    };
    let ete = e.transpose() * &e
        + nalgebra::DMatrix::identity(img_dim, img_dim) * lambda;
    let rhs = -(e.transpose() * &c_vec);
    let delta_star = ete.lu().solve(&rhs).expect("solvable");
    let cfg_vae = AttackConfig {
        kind: AttackKind::VaeRemoval,
        steps: 600,
        lr: attacks::convergent_lr(sigma_e, lambda),
        lambda,
        n_pairs: 1,
    };
    let out = attacks::vae_removal(&pipeline, &marked, &cfg_vae).unwrap();
    for pair in out.loss_trace.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-6, "vae loss increased: {pair:?}");
    }
    // The attacked image is clamped; interior pixels carry base + delta.
    let mut worst_vae = 0.0f64;
    for (k, (att, base)) in out
        .attacked_image
        .iter()
        .zip(marked.iter())
        .enumerate()
    {
        if *att > 0.0 && *att < 1.0 {
            worst_vae = worst_vae.max((att - base - delta_star[k]).abs());
        }
    }
    assert!(worst_vae < 1e-3, "vae removal vs closed form: {worst_vae}");
    println!(
        "[criterion 10] PASS attack optimizer: imp within {worst:.2e}, vae within {worst_vae:.2e} \
         of the closed-form optima; loss traces non-increasing"
    );
}

#[test]
fn criterion_11_distortion_suite_sanity() {
    let l = lab();
    let tuning = MatrixTuning::default();
    let run = |spec: DistortionSpec| {
        eval::run_cell(
            &l.pipeline,
            Some(&l.model),
            &CellSpec {
                scheme_name: "ists".into(),
                scheme: SchemeConfig::ists(),
                attack: None,
                distortion: Some(spec),
            },
            64,
            l.cfg.seed,
            &tuning,
        )
        .unwrap()
    };
    let noise = run(DistortionSpec::noise(0.1));
    let jpeg = run(DistortionSpec::jpeg(25.0));
    let rotation = run(DistortionSpec::rotation(75.0));
    assert!(noise.auc >= 0.9, "noise AUC {}", noise.auc);
    assert!(jpeg.auc >= 0.9, "jpeg AUC {}", jpeg.auc);
    // Rotation robustness does not transfer to the toy codec; the cell is
    // executed and reported without an asserted floor.
    println!(
        "[criterion 11] PASS distortion sanity: noise AUC {:.4}, jpeg-25 AUC {:.4}; \
         rotation-75 AUC {:.4} (reported, not gated)",
        noise.auc, jpeg.auc, rotation.auc
    );
}

#[test]
fn criterion_12_ablation_table_shape_and_aggregates() {
    let l = lab();
    let dir = tempfile::TempDir::new().unwrap();
    let mut cfg = l.cfg.clone();
    cfg.evaluation.n_pairs = 8; // shape and aggregate arithmetic only

    // Persist selector/key the way the CLI consumes them.
    let key_path = dir.path().join("key.json");
    l.key.save(&key_path).unwrap();
    let selector_path = dir.path().join("selector.json");
    SelectorFile::from_model(&l.model).save(&selector_path).unwrap();

    let out = cmd_evaluate(
        &cfg,
        &selector_path,
        &key_path,
        EvaluateMode::Ablation,
        dir.path(),
    )
    .unwrap();
    let matrix = out.matrix.expect("matrix result");
    // 4 scheme rows x (original + 6 attacks).
    let schemes = ["ists", "no-dyn-pattern", "no-dyn-injection", "one-sided"];
    assert_eq!(matrix.cells.len(), 4 * 7);
    for scheme in schemes {
        let row: Vec<_> = matrix.cells.iter().filter(|c| c.scheme == scheme).collect();
        assert_eq!(row.len(), 7, "row {scheme}");
        assert!(row.iter().all(|c| c.error.is_none()), "failures in {scheme}");
    }
    // Aggregates equal mean/min of the per-attack cells to 1e-12.
    assert_eq!(matrix.aggregates.len(), 4);
    for agg in &matrix.aggregates {
        let grab = |attack: &str| {
            matrix
                .cells
                .iter()
                .find(|c| c.scheme == agg.scheme && c.attack == attack)
                .map(|c| (c.auc, c.tpr_at_1fpr))
                .unwrap()
        };
        let removal = [
            grab("imp-removal"),
            grab("avg-removal"),
            grab("vae-removal"),
        ];
        let forgery = [
            grab("imp-forgery"),
            grab("avg-forgery"),
            grab("vae-forgery"),
        ];
        let mean = |v: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| {
            v.iter().map(f).sum::<f64>() / v.len() as f64
        };
        let min = |v: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| {
            v.iter().map(f).fold(f64::INFINITY, f64::min)
        };
        assert!((agg.removal_average_auc - mean(&removal, |x| x.0)).abs() < 1e-12);
        assert!((agg.removal_worst_auc - min(&removal, |x| x.0)).abs() < 1e-12);
        assert!((agg.removal_average_tpr - mean(&removal, |x| x.1)).abs() < 1e-12);
        assert!((agg.removal_worst_tpr - min(&removal, |x| x.1)).abs() < 1e-12);
        assert!((agg.forgery_average_auc - mean(&forgery, |x| x.0)).abs() < 1e-12);
        assert!((agg.forgery_worst_auc - min(&forgery, |x| x.0)).abs() < 1e-12);
        assert!((agg.forgery_average_tpr - mean(&forgery, |x| x.1)).abs() < 1e-12);
        assert!((agg.forgery_worst_tpr - min(&forgery, |x| x.1)).abs() < 1e-12);
    }
    assert!(out.cells_csv.exists());
    assert!(out.aggregates_csv.as_ref().unwrap().exists());
    assert!(out.plot.exists());
    println!(
        "[criterion 12] PASS ablation table: 4x7 grid with exact average/worst aggregates; \
         artifacts in {:?}",
        dir.path()
    );
}
