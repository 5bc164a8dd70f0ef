use pofbm::harness::io::ingest_csv;
use pofbm::harness::runs::{load_data, run_multilevel, run_single_level, write_dataset};
use pofbm::harness::ExperimentConfig;

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[test]
fn synthetic_data_round_trips_exactly() {
    let cfg = ExperimentConfig::parse("seed = 9\n[data]\nhorizon = 40\nsim_level = 6\n").unwrap();
    let data = load_data(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&data, dir.path(), false).unwrap();
    let back = ingest_csv(&dir.path().join("data.csv")).unwrap();
    assert_eq!(back.len(), 40);
    for (a, b) in data.y.iter().zip(&back) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn multilevel_at_base_level_is_corrected_single_level() {
    let text = "seed = 5\n[data]\nhorizon = 4\n[levels]\nmin = 3\nmax = 3\nsingle = 3\n[mcmc]\niterations = 300\nproposal_steps = [1.0, 1.5]\n[multilevel]\niterations = [300]\n";
    let cfg = ExperimentConfig::parse(text).unwrap();
    let data = load_data(&cfg).unwrap();
    let sl = run_single_level(&cfg, &data.y).unwrap();
    let ml = run_multilevel(&cfg, &data.y).unwrap();
    assert_eq!(ml.estimate.levels.len(), 1);
    assert!(ml.estimate.total.iter().all(|v| v.is_finite()));
    assert!(sl.run.estimate.fine.iter().all(|v| v.is_finite()));
}

// Replicated single-level runs at the finest level and multilevel runs up to
// it estimate the same posterior means.
#[test]
fn single_and_multilevel_agree_on_toy() {
    let base = "[data]\nhorizon = 5\n[levels]\nmin = 3\nmax = 4\nsingle = 4\n[mcmc]\niterations = 1500\nproposal_steps = [1.0, 1.5]\n[multilevel]\niterations = [1500, 600]\n";
    let reps = 8;
    let y = load_data(&ExperimentConfig::parse(&format!("seed = 1\n{base}")).unwrap()).unwrap().y;
    let (mut sl, mut ml) = (vec![Vec::new(); 2], vec![Vec::new(); 2]);
    for r in 0..reps {
        let cfg = ExperimentConfig::parse(&format!("seed = {}\n{base}", 100 + r)).unwrap();
        let s = run_single_level(&cfg, &y).unwrap();
        let m = run_multilevel(&cfg, &y).unwrap();
        for k in 0..2 {
            sl[k].push(s.run.estimate.fine[k]);
            ml[k].push(m.estimate.total[k]);
        }
    }
    for k in 0..2 {
        let (ms, ss) = mean_sd(&sl[k]);
        let (mm, sm) = mean_sd(&ml[k]);
        let se = ((ss * ss + sm * sm) / reps as f64).sqrt();
        assert!((ms - mm).abs() <= 3.0 * se, "param {k}: single {ms} vs multilevel {mm}, se {se}");
    }
}
