//! Stage commands on a small synthetic IDX dataset.

use std::path::Path;
use std::time::SystemTime;

use switchleak::dataset::{write_idx_images, write_idx_labels, RawImages};
use switchleak::experiment::{self, RunSpec};
use switchleak::report;
use switchleak::{Error, SeededRng};

/// Ten classes, each a bright 6×6 block at its own spot plus speckle noise.
fn write_synthetic(dir: &Path, n: usize, prefix: &str, seed: u64) {
    let mut rng = SeededRng::new(seed);
    let mut pixels = vec![0u8; n * 784];
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let class = k % 10;
        let img = &mut pixels[k * 784..(k + 1) * 784];
        let (r0, c0) = (2 + (class / 5) * 12, 2 + (class % 5) * 5);
        for r in r0..r0 + 6 {
            for c in c0..c0 + 6 {
                img[r * 28 + c] = 200 + rng.below(56) as u8;
            }
        }
        for _ in 0..20 {
            img[rng.below(784)] = rng.below(256) as u8;
        }
        labels.push(class as u8);
    }
    let raw = RawImages {
        rows: 28,
        cols: 28,
        pixels,
    };
    write_idx_images(dir.join(format!("{prefix}-images-idx3-ubyte")), &raw).unwrap();
    write_idx_labels(dir.join(format!("{prefix}-labels-idx1-ubyte")), &labels).unwrap();
}

fn fixture() -> (tempfile::TempDir, RunSpec) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mnist");
    std::fs::create_dir_all(&data).unwrap();
    write_synthetic(&data, 300, "train", 1);
    write_synthetic(&data, 80, "t10k", 2);
    let spec = RunSpec {
        data_dir: data,
        out_dir: dir.path().join("out"),
        subset_sizes: vec![1, 20],
        betas: vec![0.0, 1.0],
        epsilons: vec![0.0, 0.1],
        n_runs: 2,
        oracle_epochs: 3,
        surrogate_epochs: 2,
        workers: 2,
        ..RunSpec::default()
    };
    (dir, spec)
}

fn mtime(p: &Path) -> SystemTime {
    std::fs::metadata(p).unwrap().modified().unwrap()
}

#[test]
fn extract_single_cell_writes_one_surrogate() {
    let (_dir, spec) = fixture();
    let spec = RunSpec {
        subset_sizes: vec![10],
        betas: vec![0.0],
        n_runs: 1,
        ..spec
    };
    let oracles = experiment::cmd_train_oracle(&spec).unwrap();
    assert_eq!(oracles.len(), 1);
    let files = experiment::cmd_extract(&spec, None).unwrap();
    assert_eq!(files.len(), 1);
    let models = std::fs::read_dir(spec.out_dir.join("models")).unwrap();
    let surrogates = models
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("surrogate-")
        })
        .count();
    assert_eq!(surrogates, 1);
    let mse = std::fs::read_to_string(spec.out_dir.join(experiment::MSE_RESULTS_FILE)).unwrap();
    assert_eq!(mse.lines().count(), 2);
    assert_eq!(mse.lines().next().unwrap(), report::MSE_RESULTS_HEADER);
}

#[test]
fn full_run_resumes_without_redoing_finished_cells() {
    let (_dir, spec) = fixture();
    experiment::cmd_full(&spec).unwrap();
    let read = |name: &str| std::fs::read(spec.out_dir.join(name)).unwrap();
    let before: Vec<Vec<u8>> = [
        experiment::MSE_RESULTS_FILE,
        experiment::ATTACK_RESULTS_FILE,
        report::MSE_TABLE,
    ]
    .iter()
    .map(|n| read(n))
    .collect();

    let models = spec.out_dir.join("models");
    let kept = models.join("surrogate-run0-size20-beta0.bin");
    let redo = models.join("surrogate-run1-size20-beta1.bin");
    let kept_time = mtime(&kept);
    let cells = spec.out_dir.join("cells");
    for f in [
        "run1-size20-beta1.extract.done",
        "run1-size20-beta1.attack.done",
    ] {
        std::fs::remove_file(cells.join(f)).unwrap();
    }
    std::fs::remove_file(&redo).unwrap();

    experiment::cmd_full(&spec).unwrap();
    assert_eq!(mtime(&kept), kept_time, "finished cell was retrained");
    assert!(redo.exists());
    let after: Vec<Vec<u8>> = [
        experiment::MSE_RESULTS_FILE,
        experiment::ATTACK_RESULTS_FILE,
        report::MSE_TABLE,
    ]
    .iter()
    .map(|n| read(n))
    .collect();
    assert_eq!(before, after);
}

#[test]
fn attack_tables_have_documented_shape() {
    let (_dir, spec) = fixture();
    let spec = RunSpec {
        subset_sizes: vec![20],
        betas: vec![0.0],
        n_runs: 1,
        epsilons: experiment::DEFAULT_EPSILONS.to_vec(),
        ..spec
    };
    experiment::cmd_train_oracle(&spec).unwrap();
    experiment::cmd_extract(&spec, None).unwrap();
    let path = experiment::cmd_attack(&spec, None, &[]).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "run_seed,subset_size,beta,epsilon,wb_rel_acc,bb_rel_acc,transferability,clean_acc_oracle,clean_acc_surrogate"
    );
    assert_eq!(lines.count(), 10);

    // a fresh output dir with ε = 0 only: nothing is perturbed
    let zero = RunSpec {
        epsilons: vec![0.0],
        out_dir: spec.out_dir.with_file_name("zero"),
        ..spec.clone()
    };
    let oracle = spec.out_dir.join("models/oracle-run0.bin");
    let surrogate = spec.out_dir.join("models/surrogate-run0-size20-beta0.bin");
    let path = experiment::cmd_attack(&zero, Some(&oracle), &[surrogate]).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[4], row[5]), ("1", "1"));
}

#[test]
fn oracle_training_is_byte_reproducible() {
    let (dir, spec) = fixture();
    let spec = RunSpec { n_runs: 1, ..spec };
    let a = experiment::cmd_train_oracle(&spec).unwrap();
    let other = RunSpec {
        out_dir: dir.path().join("again"),
        ..spec
    };
    let b = experiment::cmd_train_oracle(&other).unwrap();
    assert_eq!(std::fs::read(&a[0]).unwrap(), std::fs::read(&b[0]).unwrap());
}

#[test]
fn corrupt_oracle_file_is_a_format_error() {
    let (dir, spec) = fixture();
    let spec = RunSpec { n_runs: 1, ..spec };
    let good = experiment::cmd_train_oracle(&spec).unwrap();
    let bytes = std::fs::read(&good[0]).unwrap();
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    let err = experiment::cmd_extract(&spec, Some(&bad)).unwrap_err();
    assert!(matches!(err, Error::ModelFormat { .. }), "{err}");
}

#[test]
fn extract_without_oracles_names_the_missing_file() {
    let (_dir, spec) = fixture();
    let err = experiment::cmd_extract(&spec, None).unwrap_err();
    assert!(err.to_string().contains("oracle-run0.bin"), "{err}");
}

#[test]
fn report_reproduces_full_run_tables() {
    let (_dir, spec) = fixture();
    let spec = RunSpec {
        subset_sizes: vec![20],
        n_runs: 1,
        ..spec
    };
    experiment::cmd_full(&spec).unwrap();
    let table = spec.out_dir.join(report::TRANSFER_TABLE);
    let before = std::fs::read(&table).unwrap();
    std::fs::remove_file(&table).unwrap();
    experiment::cmd_report(&spec).unwrap();
    assert_eq!(std::fs::read(&table).unwrap(), before);
    let meta = std::fs::read_to_string(spec.out_dir.join(report::METADATA_FILE)).unwrap();
    assert!(meta.contains("epsilons = 0,0.1"));
    assert!(meta.contains("betas = 0,1"));
}

#[test]
fn smoke_spec_is_quick() {
    let (_dir, spec) = fixture();
    let spec = RunSpec {
        subset_sizes: vec![100],
        n_runs: 2,
        ..spec
    };
    let t = std::time::Instant::now();
    let files = experiment::cmd_full(&spec).unwrap();
    assert!(t.elapsed().as_secs() < 300);
    assert!(files.iter().all(|f| f.exists()));
    let manifest = std::fs::read_to_string(spec.out_dir.join(experiment::MANIFEST_FILE)).unwrap();
    for seed in spec.run_seeds() {
        assert!(manifest.contains(&seed.to_string()));
    }
}
