use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn voxtracer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxtracer")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn tone(path: &Path) {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 22050,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for i in 0..22050 {
        w.write_sample(((i as f64 * 0.05).sin() * 12000.0) as i16).unwrap();
    }
    w.finalize().unwrap();
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_is_a_config_error() {
    let o = voxtracer(&["run", "--config", "/nonexistent/toy.toml"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_dataset_names_the_path() {
    let d = scratch("dataset");
    let cfg = d.join("c.toml");
    fs::write(&cfg, "seed = 1\ndataset = \"no-such-corpus\"\n").unwrap();
    let o = voxtracer(&["train-hiding", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no-such-corpus"), "{}", stderr(&o));
}

#[test]
fn missing_seed_is_rejected() {
    let d = scratch("seed");
    let cfg = d.join("c.toml");
    fs::write(&cfg, "conditions = [\"none\"]\n").unwrap();
    let o = voxtracer(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn tracing_without_models_is_a_dependency_error() {
    let d = scratch("trace");
    let cfg = d.join("c.toml");
    fs::write(&cfg, format!("seed = 1\noutput_dir = \"{}\"\n", d.join("out").display())).unwrap();
    let wav = d.join("a.wav");
    tone(&wav);
    let o = voxtracer(&["trace", "--config", cfg.to_str().unwrap(), "--input", wav.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn unconfigured_codec_is_an_environment_error() {
    let d = scratch("codec");
    let (a, b) = (d.join("a.wav"), d.join("b.wav"));
    tone(&a);
    let o = voxtracer(&["transmit", "--input", a.to_str().unwrap(), "--channel", "mp3@64", "--output", b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn bad_channel_spec_is_a_parameter_error() {
    let d = scratch("spec");
    let a = d.join("a.wav");
    tone(&a);
    let o = voxtracer(&["transmit", "--input", a.to_str().unwrap(), "--channel", "noise:abc", "--output", d.join("b.wav").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn transmit_is_deterministic_per_seed() {
    let d = scratch("transmit");
    let a = d.join("a.wav");
    tone(&a);
    let run = |seed: &str, out: &str| {
        let p = d.join(out);
        let o = voxtracer(&["transmit", "--input", a.to_str().unwrap(), "--channel", "none+noise:20+amp:0.9", "--seed", seed, "--output", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(p).unwrap()
    };
    let (x, y, z) = (run("7", "x.wav"), run("7", "y.wav"), run("8", "z.wav"));
    assert_eq!(x, y);
    assert_ne!(x, z);
}

#[test]
fn plot_embeddings_writes_a_png() {
    let d = scratch("plot");
    let pairs = d.join("pairs.tsv");
    let mut text = String::new();
    for (s, base) in [("a", 1.0), ("b", -1.0), ("c", 0.0)] {
        for kind in ["source", "recovered"] {
            let v: Vec<String> = (0..8).map(|k| format!("{}", base + k as f64 * 0.01 * (s.len() as f64))).collect();
            text.push_str(&format!("{s}\t{kind}\t{}\n", v.join(" ")));
        }
    }
    fs::write(&pairs, text).unwrap();
    let png = d.join("e.png");
    let o = voxtracer(&["plot-embeddings", "--pairs", pairs.to_str().unwrap(), "--output", png.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(&fs::read(&png).unwrap()[1..4], b"PNG");
}
