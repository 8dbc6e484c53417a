use std::path::Path;
use std::process::{Command, Output};

use transnext::backbone::{AnyTensor, Archive};
use transnext::Tensor;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transnext")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn info_reports_params_and_flops() {
    let o = run(&["info", "--config", "micro", "--resolution", "224", "--mode", "normal"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.starts_with("# transnext info\n"));
    assert!(out.contains("#   channels=48,96,192,384\n"));
    assert!(out.contains("scope,module,params,macs,flops_mac1,flops_mac2\n"));
    let total = out.lines().find(|l| l.starts_with("model,all,")).unwrap();
    let fields: Vec<u64> = total.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
    assert_eq!(fields[0], 12_787_956);
    assert!((fields[2] as f64 / 2.7e9 - 1.0).abs() < 0.05);
    assert!(fields[3] > 2 * fields[2]);
    for s in 1..=4 {
        assert!(out.contains(&format!("\nstage{s},all,")));
    }

    let tiny = stdout(&run(&["info", "--config", "tiny"]));
    assert!(tiny.contains("# params: 28.228M"));
}

#[test]
fn info_errors() {
    assert_eq!(run(&["info", "--resolution", "230"]).status.code(), Some(2));
    assert_eq!(run(&["info", "--config", "gigantic"]).status.code(), Some(3));
    assert_eq!(run(&["info", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["info", "--mode", "sideways"]).status.code(), Some(2));
}

#[test]
fn custom_config_echoes_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    let text = "channels=48,96\nblocks=1,2\nmlp_ratio=4,4\nmixers=A,M\nwindow=5,-\npool_mode=fixed,-\npool=4,-\n";
    std::fs::write(&cfg, text).unwrap();
    let o = run(&["info", "--config", p(&cfg), "--resolution", "64"]);
    assert_eq!(o.status.code(), Some(0));
    let echoed: String = stdout(&o)
        .lines()
        .filter_map(|l| l.strip_prefix("#   "))
        .map(|l| format!("{l}\n"))
        .collect();
    assert_eq!(echoed, text);
    std::fs::write(&cfg, text.replace("48,", "50,")).unwrap();
    assert_eq!(run(&["info", "--config", p(&cfg)]).status.code(), Some(2));
}

fn write_image(path: &Path, h: usize, w: usize) {
    let mut a = Archive::new();
    a.insert("image", AnyTensor::F32(Tensor::zeros(&[3, h, w]).unwrap()));
    a.write(path).unwrap();
}

#[test]
fn forward_roundtrip_and_modes() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.tnxt");
    write_image(&img, 224, 224);
    let outs: Vec<_> = ["normal", "linear", "normal"]
        .iter()
        .enumerate()
        .map(|(i, mode)| {
            let out = dir.path().join(format!("out{i}.tnxt"));
            let o = run(&["forward", "--config", "micro", "--seed", "3", "--input", p(&img), "--mode", mode, "--output", p(&out)]);
            assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
            assert!(stdout(&o).contains("seed: 3"));
            std::fs::read(&out).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0], outs[2]);
    let logits = Archive::from_bytes(&outs[0]).unwrap().get("logits").unwrap().to_typed::<f32>();
    assert_eq!(logits.dims(), [1000]);
    assert!(logits.all_finite());

    let cfg = transnext::backbone::ModelConfig::stock("micro").unwrap();
    let model = transnext::backbone::Model::<f32>::new_seeded(&cfg, 3).unwrap();
    let direct = model.forward(&Tensor::zeros(&[3, 224, 224]).unwrap(), transnext::backbone::Mode::Normal).unwrap();
    assert_eq!(direct, logits);
}

#[test]
fn forward_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.tnxt");
    let missing = dir.path().join("missing.tnxt");
    let o = run(&["forward", "--input", p(&missing), "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let img = dir.path().join("img.tnxt");
    write_image(&img, 100, 96);
    let o = run(&["forward", "--input", p(&img), "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("multiple of 32"));
    std::fs::write(&img, b"TNXT\x01\x00").unwrap();
    assert_eq!(run(&["forward", "--input", p(&img), "--output", p(&out)]).status.code(), Some(3));
}

#[test]
fn bench_csv_schema() {
    let o = run(&["bench", "--h", "16", "--w", "16", "--c", "24", "--heads", "2", "--iters", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "case,h,w,c,heads,k,iters,ns_per_iter,scratch_bytes");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("fused,16,16,24,2,3,2,"));
    assert!(rows[2].starts_with("naive,16,16,24,2,3,2,"));
}

#[test]
fn erf_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("id");
    let o = run(&["erf", "--toy", "identity", "--size", "7", "--output", p(&prefix)]);
    assert_eq!(o.status.code(), Some(0));
    let grid = std::fs::read_to_string(prefix.with_extension("txt")).unwrap();
    let values: Vec<f64> = grid.split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 49);
    assert!(values.iter().enumerate().all(|(i, &v)| v == if i == 24 { 1.0 } else { 0.0 }));
    let pgm = std::fs::read(prefix.with_extension("pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n7 7\n255\n"));
    assert_eq!(pgm.len(), b"P5\n7 7\n255\n".len() + 49);

    let agg = dir.path().join("agg");
    let o = run(&["erf", "--toy", "aggregated", "--size", "9", "--output", p(&agg)]);
    assert_eq!(o.status.code(), Some(0));
    let o = run(&["erf", "--toy", "identity", "--size", "72", "--output", p(&agg)]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["erf", "--output", p(&agg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn selftest_passes() {
    let o = run(&["selftest"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let passed = out.lines().filter(|l| l.contains(",pass,")).count();
    assert!(passed >= 12, "{out}");
}
