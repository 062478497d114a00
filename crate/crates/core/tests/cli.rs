use std::path::Path;
use std::process::Command;

use gmsfem::harness::parse_csv;

fn gmsfem(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gmsfem")).args(args).output().unwrap()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("tiny.cfg");
    std::fs::write(
        &cfg,
        "coarse = 3x3\nfine = 4\nkappa = generated\nshape = rect 0 0.45 1 0.55\ncontrast = 1e3\n\
         initial_basis = 1\nmode = online_full\nmax_iters = 2\n",
    )
    .unwrap();
    cfg
}

#[test]
fn run_writes_csv_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let csv = dir.path().join("o/run.csv");
    let out = gmsfem(&["run", "--config", cfg.to_str().unwrap(), "--out", csv.to_str().unwrap(), "--theta", "0.5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = parse_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records[2].e_a < records[0].e_a);
    assert!(csv.with_extension("gp").exists());
}

#[test]
fn compare_writes_one_csv_per_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let csv = dir.path().join("cmp.csv");
    let out = gmsfem(&["compare", "--config", cfg.to_str().unwrap(), "--out", csv.to_str().unwrap(), "--counts", "1,2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for k in [1, 2] {
        assert!(dir.path().join(format!("cmp-basis{k}.csv")).exists());
    }
    let plot = std::fs::read_to_string(dir.path().join("cmp-compare.gp")).unwrap();
    assert_eq!(plot.matches("with linespoints").count(), 2);
}

#[test]
fn missing_field_fails_with_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("run.csv");
    let out = gmsfem(&["run", "--coarse", "2", "--fine", "2", "--kappa", "nope.kappa", "--out", csv.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(std::fs::read_to_string(&csv).unwrap().contains("# error:"));
}

#[test]
fn bad_flag_values_are_rejected() {
    let out = gmsfem(&["run", "--theta", "1.5"]);
    assert!(!out.status.success());
    let out = gmsfem(&["run", "--set", "colour=red"]);
    assert!(!out.status.success());
}

#[test]
fn generated_field_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.kappa");
    let out = gmsfem(&["generate-field", "--name", "channels-8x8", "--contrast", "100", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    let field = gmsfem::fem::PermeabilityField::read(&path).unwrap();
    assert_eq!((field.cells_x(), field.cells_y()), (256, 256));
    assert_eq!(field.contrast(), 100.0);
}
