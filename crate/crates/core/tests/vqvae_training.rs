use coordfuse::datamodel::{synth_dataset, SyntheticConfig};
use coordfuse::fvtc::{fvtc_matrix, FvtcMatrix};
use coordfuse::vqvae::{fit_vqvae, VqTrainConfig, VqvaeConfig, VqvaeModel};

fn corpus() -> Vec<FvtcMatrix> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        n_subjects: 16,
        sessions_per_subject: 2,
        segments_per_session: 2,
        seed: 21,
        ..SyntheticConfig::default()
    };
    let m = synth_dataset(&cfg, dir.path()).unwrap();
    m.sessions
        .iter()
        .flat_map(|s| s.segments.iter().map(move |r| (s, r)))
        .map(|(s, r)| fvtc_matrix(&m.load_segment(s, r).unwrap(), 50, true).unwrap())
        .collect()
}

#[test]
fn loss_halves_with_step_invariants() {
    let data = corpus();
    assert_eq!(data.len(), 64);
    let cfg = VqvaeConfig::default();
    let mut model = VqvaeModel::new(cfg, 1).unwrap();
    let refs: Vec<_> = data.iter().map(|m| m.values()).collect();
    model.init_codebook_from_data(&refs, 2).unwrap();
    let mut steps = 0;
    let out = fit_vqvae(model, &data, &[], VqTrainConfig::default(), 5, &mut |s| {
        steps += 1;
        let l = s.losses;
        assert!((l.total - (l.reconstruction + s.beta * l.commitment + l.codebook)).abs() <= 1e-6);
        let expect = (0.25 * s.entries_per_matrix as f64).round() as usize;
        assert!(s.masked_counts.iter().all(|&c| c == expect));
        for (row, &k) in s.latents.chunks(64).zip(s.indices) {
            let d = |j: usize| -> f64 {
                row.iter().zip(&s.codebook[j * 64..(j + 1) * 64]).map(|(a, b)| (a - b) * (a - b)).sum()
            };
            let best = (0..256).map(d).fold(f64::INFINITY, f64::min);
            assert!(d(k) <= best);
        }
    })
    .unwrap();
    let first = out.history[0].train.total;
    let last = out.history.last().unwrap().train.total;
    assert_eq!(steps, 100 * 8);
    assert!(last <= 0.5 * first, "first {first}, last {last}");
}
