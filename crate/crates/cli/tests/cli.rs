//! End-to-end runs of the binary over its external interfaces.

use std::path::Path;
use std::process::Command;

fn hactnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hactnet"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn hactnet");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small two-stain test image with a white margin.
fn write_test_image(path: &Path) {
    use hactnet_core::stain::StainBasis;
    use hactnet_core::RgbImage;
    let basis = StainBasis::he_reference();
    let (vh, ve) = (basis.column(0), basis.column(1));
    let to_byte = |od: f64| (256.0 * 10f64.powf(-od) - 1.0).round().clamp(0.0, 255.0) as u8;
    let mut img = RgbImage::filled(48, 48, [255, 255, 255]).unwrap();
    for y in 2..46 {
        for x in 2..46 {
            let (c1, c2) = if (x / 8 + y / 8) % 2 == 0 { (0.9, 0.1) } else { (0.15, 0.8) };
            img.set(
                x,
                y,
                [
                    to_byte(vh[0] * c1 + ve[0] * c2),
                    to_byte(vh[1] * c1 + ve[1] * c2),
                    to_byte(vh[2] * c1 + ve[2] * c2),
                ],
            );
        }
    }
    // A few dark nuclei blobs.
    for (cx, cy) in [(10usize, 12usize), (30, 20), (20, 38)] {
        for y in cy - 2..cy + 2 {
            for x in cx - 2..cx + 2 {
                img.set(x, y, [50, 40, 90]);
            }
        }
    }
    img.save_png(path).unwrap();
}

#[test]
fn stain_normalize_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    let basis_path = dir.path().join("basis.json");
    let output = dir.path().join("out.png");
    write_test_image(&input);
    hactnet_core::stain::StainBasis::he_reference().save_json(&basis_path).unwrap();
    run_ok(hactnet()
        .arg("stain-normalize")
        .arg("--input")
        .arg(&input)
        .arg("--target")
        .arg(&basis_path)
        .arg("--output")
        .arg(&output));
    let out = hactnet_core::RgbImage::load_png(&output).unwrap();
    assert_eq!(out.dims(), (48, 48));
    assert_eq!(out.get(0, 0), [255, 255, 255]); // background preserved
}

#[test]
fn build_graph_from_csv_nuclei() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("img.png");
    write_test_image(&image);
    let nuclei = dir.path().join("nuclei.csv");
    std::fs::write(&nuclei, "10,12\n30,20\n20,38\n").unwrap();
    let out = dir.path().join("graph.json");
    let stdout = run_ok(hactnet()
        .arg("build-graph")
        .arg("--image")
        .arg(&image)
        .arg("--nuclei")
        .arg(&nuclei)
        .arg("--k")
        .arg("2")
        .arg("--d-min")
        .arg("40")
        .arg("--n-segments")
        .arg("9")
        .arg("--out")
        .arg(&out));
    assert!(stdout.contains("3 cells"));
    let g = hactnet_core::graph::HactGraph::load_json(&out).unwrap();
    assert_eq!(g.cell.node_count, 3);
    assert_eq!(g.cell.feature_dim(), 18);
    g.validate().unwrap();
}

#[test]
fn build_graph_external_features() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("img.png");
    write_test_image(&image);
    let nuclei = dir.path().join("nuclei.csv");
    std::fs::write(&nuclei, "10,12\n30,20\n").unwrap();
    // External mode needs row counts matching the entity counts; first run
    // handcrafted mode to learn the region count.
    let probe = dir.path().join("probe.json");
    run_ok(hactnet()
        .arg("build-graph")
        .arg("--image")
        .arg(&image)
        .arg("--nuclei")
        .arg(&nuclei)
        .arg("--n-segments")
        .arg("9")
        .arg("--feature-mode")
        .arg("none")
        .arg("--out")
        .arg(&probe));
    let regions = hactnet_core::graph::HactGraph::load_json(&probe).unwrap().tissue.node_count;

    let cell_csv = dir.path().join("cells.csv");
    std::fs::write(&cell_csv, "1.0,2.0,3.0\n4.0,5.0,6.0\n").unwrap();
    let tissue_csv = dir.path().join("tissue.csv");
    let rows: String = (0..regions).map(|r| format!("{r}.5,0.25\n")).collect();
    std::fs::write(&tissue_csv, rows).unwrap();
    let out = dir.path().join("graph.json");
    run_ok(hactnet()
        .arg("build-graph")
        .arg("--image")
        .arg(&image)
        .arg("--nuclei")
        .arg(&nuclei)
        .arg("--n-segments")
        .arg("9")
        .arg("--feature-mode")
        .arg("external")
        .arg("--features-cell")
        .arg(&cell_csv)
        .arg("--features-tissue")
        .arg(&tissue_csv)
        .arg("--out")
        .arg(&out));
    let g = hactnet_core::graph::HactGraph::load_json(&out).unwrap();
    assert_eq!(g.cell.feature_dim(), 5); // 3 external + 2 spatial
    assert_eq!(g.tissue.feature_dim(), 4); // 2 external + 2 spatial
}

fn tiny_config_json() -> String {
    serde_json::json!({
        "layers": 2,
        "channels": 8,
        "embed_dim": 12,
        "classifier_channels": 12,
        "epochs": 2,
        "batch_size": 4,
        "seed": 5
    })
    .to_string()
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_ok(hactnet()
        .arg("synth-data")
        .arg("--seed")
        .arg("3")
        .arg("--n-train")
        .arg("6")
        .arg("--n-val")
        .arg("3")
        .arg("--n-test")
        .arg("3")
        .arg("--out-dir")
        .arg(&data));
    assert!(data.join("train.jsonl").exists());
    assert!(data.join("classes.json").exists());

    let config = dir.path().join("config.json");
    std::fs::write(&config, tiny_config_json()).unwrap();
    let ckpt = dir.path().join("ckpt.json");
    let stdout = run_ok(hactnet()
        .arg("train")
        .arg("--train")
        .arg(data.join("train.jsonl"))
        .arg("--val")
        .arg(data.join("val.jsonl"))
        .arg("--config")
        .arg(&config)
        .arg("--classes")
        .arg(data.join("classes.json"))
        .arg("--out")
        .arg(&ckpt));
    assert!(stdout.contains("epoch"));
    assert!(ckpt.exists());

    let metrics_path = dir.path().join("metrics.json");
    let stdout = run_ok(hactnet()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--test")
        .arg(data.join("test.jsonl"))
        .arg("--out")
        .arg(&metrics_path));
    assert!(stdout.contains("weighted F1"));
    assert!(stdout.contains("sparse") && stdout.contains("dense"));
    let metrics: hactnet_core::metrics::Metrics =
        serde_json::from_str(&std::fs::read_to_string(&metrics_path).unwrap()).unwrap();
    let total: usize = metrics.confusion.iter().flatten().sum();
    assert_eq!(total, 6);
}

#[test]
fn seed_env_var_overrides_dataset_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(hactnet()
            .arg("synth-data")
            .arg("--seed")
            .arg("1")
            .arg("--n-train")
            .arg("2")
            .arg("--n-val")
            .arg("1")
            .arg("--n-test")
            .arg("1")
            .arg("--out-dir")
            .arg(out)
            .env("HACTNET_SEED", "42"));
    }
    let ga = std::fs::read_to_string(a.join("train_0000.json")).unwrap();
    let gb = std::fs::read_to_string(b.join("train_0000.json")).unwrap();
    assert_eq!(ga, gb);

    let c = dir.path().join("c");
    run_ok(hactnet()
        .arg("synth-data")
        .arg("--seed")
        .arg("1")
        .arg("--n-train")
        .arg("2")
        .arg("--n-val")
        .arg("1")
        .arg("--n-test")
        .arg("1")
        .arg("--out-dir")
        .arg(&c));
    let gc = std::fs::read_to_string(c.join("train_0000.json")).unwrap();
    assert_ne!(ga, gc, "env override should change the dataset");
}

#[test]
fn gradcheck_command_reports_small_error() {
    let stdout = run_ok(hactnet().arg("gradcheck").arg("--graphs").arg("2"));
    assert!(stdout.contains("worst relative error"));
}

#[test]
fn ablate_runs_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_ok(hactnet()
        .arg("synth-data")
        .arg("--seed")
        .arg("11")
        .arg("--n-train")
        .arg("4")
        .arg("--n-val")
        .arg("2")
        .arg("--n-test")
        .arg("2")
        .arg("--out-dir")
        .arg(&data));
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "layers": 2, "channels": 6, "embed_dim": 8,
            "classifier_channels": 8, "epochs": 1, "batch_size": 4, "seed": 2
        })
        .to_string(),
    )
    .unwrap();
    let out = dir.path().join("grid.json");
    let stdout = run_ok(hactnet()
        .arg("ablate")
        .arg("--train")
        .arg(data.join("train.jsonl"))
        .arg("--val")
        .arg(data.join("val.jsonl"))
        .arg("--test")
        .arg(data.join("test.jsonl"))
        .arg("--classes")
        .arg(data.join("classes.json"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out));
    assert!(stdout.contains("features=stored") && stdout.contains("features=spatial-only"));
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rows.len(), 12); // 2 feature modes x 2 layers x 3 jk modes
}
