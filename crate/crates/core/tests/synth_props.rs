use mvpad_core::synth::{generate, lattice_energy, SynthConfig};
use mvpad_core::{GrayImage, Label, Partition};

/// (lattice energy at the known period, label) for every image of one partition.
fn energies(cfg: &SynthConfig, part: Partition) -> Vec<(f64, Label)> {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(cfg, dir.path()).unwrap();
    ds.records
        .iter()
        .filter(|r| r.partition == part)
        .map(|r| {
            let img = GrayImage::open(&ds.image_path(r)).unwrap();
            (lattice_energy(&img, cfg.known_attack.period), r.label)
        })
        .collect()
}

fn accuracy(e: &[(f64, Label)], t: f64) -> f64 {
    let right = e.iter().filter(|(v, l)| (*v > t) == (*l == Label::Attack)).count();
    100.0 * right as f64 / e.len() as f64
}

/// Threshold with the best accuracy, searched over midpoints.
fn best_threshold(e: &[(f64, Label)]) -> (f64, f64) {
    let mut v: Vec<f64> = e.iter().map(|x| x.0).collect();
    v.sort_by(f64::total_cmp);
    let mut cands = vec![v[0] - 1.0];
    cands.extend(v.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cands.into_iter().map(|t| (t, accuracy(e, t))).max_by(|a, b| a.1.total_cmp(&b.1)).unwrap()
}

fn mean_of(e: &[(f64, Label)], label: Label) -> f64 {
    let v: Vec<f64> = e.iter().filter(|x| x.1 == label).map(|x| x.0).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn dot_frequency_energy_separates_classes() {
    let cfg = SynthConfig::default();
    let train = energies(&cfg, Partition::Train);
    let ratio = mean_of(&train, Label::Attack) / mean_of(&train, Label::BonaFide);
    assert!(ratio >= 3.0, "attack / bona fide energy ratio {ratio:.2}");
    let (_, acc) = best_threshold(&train);
    assert!(acc >= 95.0, "train threshold accuracy {acc:.1}");
}

#[test]
fn unknown_shift_defeats_the_spectral_threshold() {
    let cfg = SynthConfig::default();
    let (t, train_acc) = best_threshold(&energies(&cfg, Partition::Train));
    let unknown_acc = accuracy(&energies(&cfg, Partition::TestUnknown), t);
    assert!(train_acc - unknown_acc >= 10.0, "train {train_acc:.1} vs unknown {unknown_acc:.1}");
}
