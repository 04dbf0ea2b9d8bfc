//! End-to-end pipeline behavior on synthetic data with known structure.

use svbackend::metrics;
use svbackend::mixture::train_mixture;
use svbackend::pipeline::{cohort_scores, score_trials, ScoreOptions, ScoringBackend};
use svbackend::plda::{train_plda, TrainOptions};
use svbackend::preprocess::speaker_groups;
use svbackend::recipe::{fit_chain, parse_recipe};
use svbackend::score_norm::{adaptive_snorm, build_cohort};
use svbackend::synth::{make_trials, sample, CovSpec, LanguageSpec, SynthSpec, TrialSpec};

/// Embedding space with 10 informative dimensions inside a much larger
/// noisy space, plus language and gender offsets. The preprocessing recipe
/// exists to cope with exactly this structure.
fn confounded_spec(dim: usize, n_speakers: usize, sessions: usize, seed: u64) -> SynthSpec {
    let mut gender_shift = vec![0.0; dim];
    gender_shift[10] = 2.0;
    let mut eng = vec![0.0; dim];
    eng[0] = 2.8;
    let mut cmn = vec![0.0; dim];
    cmn[0] = -1.4;
    cmn[1] = 2.4;
    let mut yue = vec![0.0; dim];
    yue[0] = -1.4;
    yue[1] = -2.4;
    SynthSpec {
        dim,
        n_speakers,
        sessions_per_speaker: sessions,
        languages: vec![
            LanguageSpec { name: "eng".into(), mean_shift: eng, share: 0.4 },
            LanguageSpec { name: "cmn".into(), mean_shift: cmn, share: 0.3 },
            LanguageSpec { name: "yue".into(), mean_shift: yue, share: 0.3 },
        ],
        gender_shift,
        channel_shift: vec![0.0; dim],
        between_cov: CovSpec::Diagonal(
            (0..dim)
                .map(|i| if i < 10 { 5.0 * 0.8f64.powi(i as i32) } else { 0.01 })
                .collect(),
        ),
        within_cov: CovSpec::Diagonal(
            (0..dim).map(|i| if i < 10 { 1.5 } else { 8.0 }).collect(),
        ),
        seed,
        mean: None,
        dataset: None,
    }
}

fn speaker_split(
    set: &svbackend::EmbeddingSet,
    n_train: usize,
) -> (svbackend::EmbeddingSet, svbackend::EmbeddingSet) {
    let groups = speaker_groups(set);
    let mut train_rows = Vec::new();
    let mut eval_rows = Vec::new();
    for (i, (_, rows)) in groups.iter().enumerate() {
        if i < n_train {
            train_rows.extend_from_slice(rows);
        } else {
            eval_rows.extend_from_slice(rows);
        }
    }
    (set.select(&train_rows).unwrap(), set.select(&eval_rows).unwrap())
}

/// The full recipe (gender NAP + centering + LDA + length norm + 3-PLDA
/// mixture) must beat a single PLDA on raw, unpreprocessed embeddings when
/// the space carries noise dimensions and nuisance offsets.
#[test]
fn full_recipe_beats_raw_single_plda() {
    let spec = confounded_spec(250, 800, 3, 555);
    let set = sample(&spec).unwrap();
    let (train, eval) = speaker_split(&set, 400);
    let trials = make_trials(
        &eval,
        &TrialSpec { n_target: 500, n_nontarget: 3000, sessions_per_model: 1, seed: 31 },
    )
    .unwrap();
    let opts = TrainOptions { iterations: 25, ..TrainOptions::default() };
    let score_opts = ScoreOptions::default();

    let raw = train_plda(&train, &opts).unwrap();
    let scores =
        score_trials(&ScoringBackend::Plda(raw), None, &eval, &trials, &score_opts).unwrap();
    let (eer_raw, _) = metrics::compute_eer(&scores).unwrap();

    let steps = parse_recipe("nap:gender:1,center,lda:10,ln").unwrap();
    let (chain, _) = fit_chain(&train, &steps).unwrap();
    let train_prepared = chain.apply(&train).unwrap();
    let langs: Vec<String> = vec!["eng".into(), "cmn".into(), "yue".into()];
    let mix = train_mixture(&train_prepared, &langs, &opts).unwrap();
    let scores = score_trials(
        &ScoringBackend::Mixture(mix),
        Some(&chain),
        &eval,
        &trials,
        &score_opts,
    )
    .unwrap();
    let (eer_full, _) = metrics::compute_eer(&scores).unwrap();

    assert!(eer_full < 0.5, "sanity: full recipe EER {eer_full} must beat chance");
    assert!(eer_raw < 0.5, "sanity: raw EER {eer_raw} must beat chance");
    assert!(
        eer_full <= eer_raw,
        "full recipe ({eer_full:.4}) should not lose to raw single PLDA ({eer_raw:.4})"
    );
}

/// Adaptive s-norm of cohort-vs-cohort scores centers them: each cohort
/// speaker scored against the others gets roughly zero-mean scores.
#[test]
fn snorm_centers_cohort_scores() {
    let spec = confounded_spec(40, 220, 4, 90);
    let set = sample(&spec).unwrap();
    let (train, eval) = speaker_split(&set, 120);
    let steps = parse_recipe("center,lda:8,ln").unwrap();
    let (chain, _) = fit_chain(&train, &steps).unwrap();
    let train_prepared = chain.apply(&train).unwrap();
    let model = train_plda(&train_prepared, &TrainOptions { iterations: 10, ..Default::default() })
        .unwrap();

    let trials = make_trials(
        &eval,
        &TrialSpec { n_target: 150, n_nontarget: 350, sessions_per_model: 1, seed: 13 },
    )
    .unwrap();
    let backend = ScoringBackend::Plda(model);
    let score_opts = ScoreOptions::default();
    let scores = score_trials(&backend, Some(&chain), &eval, &trials, &score_opts).unwrap();

    let cohort = build_cohort(&train).unwrap();
    let cs = cohort_scores(&backend, Some(&chain), &eval, &trials, &cohort, &score_opts).unwrap();
    let top_n = 60;
    let normalized = adaptive_snorm(&scores, &cs.per_model, &cs.per_segment, top_n).unwrap();

    // nontarget scores should sit near zero after normalization
    let nontargets: Vec<f64> = normalized
        .entries
        .iter()
        .filter(|e| e.key == svbackend::Key::Nontarget)
        .map(|e| e.score)
        .collect();
    let mean = nontargets.iter().sum::<f64>() / nontargets.len() as f64;
    assert!(
        mean.abs() < 1.0,
        "normalized nontarget mean {mean} should be near zero"
    );

    // and normalization must preserve the ranking quality
    let (eer_raw, _) = metrics::compute_eer(&scores).unwrap();
    let (eer_norm, _) = metrics::compute_eer(&normalized).unwrap();
    assert!(eer_norm < 0.5 && eer_raw < 0.5);
}

/// S-norm of cohort-vs-cohort scores: scoring every cohort speaker against
/// the rest and normalizing with leave-self-out cohort lists centers the
/// scores near zero.
#[test]
fn snorm_of_cohort_vs_cohort_is_centered() {
    use std::collections::HashMap;
    use svbackend::data::{Key, Model, Trial, TrialType};
    use svbackend::plda::PldaScorer;

    let spec = confounded_spec(24, 150, 4, 92);
    let set = sample(&spec).unwrap();
    let (train, _) = speaker_split(&set, 150);
    let steps = parse_recipe("center,lda:8,ln").unwrap();
    let (chain, _) = fit_chain(&train, &steps).unwrap();
    let prepared = chain.apply(&train).unwrap();
    let model = train_plda(&prepared, &TrainOptions { iterations: 10, ..Default::default() })
        .unwrap();

    // cohort in the scoring representation
    let cohort = build_cohort(&train).unwrap();
    let cohort_rep = chain.apply(&cohort.to_embedding_set().unwrap()).unwrap();
    let m = cohort_rep.len();
    let scorer = PldaScorer::new(&model, &[1]).unwrap();
    let enrolls: Vec<_> = (0..m)
        .map(|i| scorer.enroll_stats(&[cohort_rep.row(i)]).unwrap())
        .collect();
    let tests: Vec<_> = (0..m)
        .map(|i| scorer.test_stats(cohort_rep.row(i)).unwrap())
        .collect();

    // full score matrix, then leave-self-out cohort lists per speaker
    let mut matrix = vec![vec![0.0f64; m]; m];
    for (i, row) in matrix.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = scorer.llr(&enrolls[i], &tests[j]);
        }
    }
    let leave_out = |i: usize| -> Vec<f64> {
        (0..m).filter(|&j| j != i).map(|j| matrix[i][j]).collect()
    };
    let mut per_model = HashMap::new();
    let mut per_segment = HashMap::new();
    let mut models = Vec::new();
    let mut trials = Vec::new();
    for i in 0..m {
        let id = cohort_rep.id(i).to_string();
        models.push(Model { id: format!("m-{id}"), segments: vec![id.clone()] });
        per_model.insert(format!("m-{id}"), leave_out(i));
        per_segment.insert(id, leave_out(i));
    }
    let mut entries = Vec::new();
    for (i, row) in matrix.iter().enumerate() {
        for (j, &score) in row.iter().enumerate() {
            if i == j {
                continue;
            }
            trials.push(Trial {
                model_id: format!("m-{}", cohort_rep.id(i)),
                test_id: cohort_rep.id(j).to_string(),
                key: Key::Nontarget,
                trial_type: TrialType::Unknown,
            });
            entries.push(svbackend::data::ScoreEntry {
                model_id: format!("m-{}", cohort_rep.id(i)),
                test_id: cohort_rep.id(j).to_string(),
                score,
                key: Key::Nontarget,
                trial_type: TrialType::Unknown,
            });
        }
    }
    let scores = svbackend::ScoreSet::new(entries, "cohort-vs-cohort").unwrap();
    let normalized = adaptive_snorm(&scores, &per_model, &per_segment, m).unwrap();
    let mean = normalized.entries.iter().map(|e| e.score).sum::<f64>()
        / normalized.entries.len() as f64;
    assert!(mean.abs() < 0.1, "cohort-vs-cohort normalized mean {mean}");
}

/// Scoring through cosine on length-normalized LDA embeddings stays well
/// above chance on held-out trials (pipeline sanity for the cosine path).
#[test]
fn cosine_pipeline_sanity() {
    let spec = confounded_spec(40, 200, 6, 91);
    let set = sample(&spec).unwrap();
    let (train, eval) = speaker_split(&set, 120);
    let steps = parse_recipe("nap:gender:1,center,lda:8,ln").unwrap();
    let (chain, _) = fit_chain(&train, &steps).unwrap();
    let trials = make_trials(
        &eval,
        &TrialSpec { n_target: 120, n_nontarget: 300, sessions_per_model: 3, seed: 3 },
    )
    .unwrap();
    let scores = score_trials(
        &ScoringBackend::Cosine,
        Some(&chain),
        &eval,
        &trials,
        &ScoreOptions::default(),
    )
    .unwrap();
    let (eer, _) = metrics::compute_eer(&scores).unwrap();
    assert!(eer < 0.35, "cosine pipeline EER {eer} unexpectedly poor");
}
