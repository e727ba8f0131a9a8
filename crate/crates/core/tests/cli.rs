use std::path::Path;

use mcot::cli::dispatch;

fn run(args: &[&str]) -> i32 {
    dispatch(args.iter().map(|s| s.to_string()))
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_scenes_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    for (dir, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        assert_eq!(
            run(&[
                "gen-scenes",
                "--count",
                "4",
                "--seed",
                seed,
                "--out",
                dir.to_str().unwrap()
            ]),
            0
        );
    }
    let strip = |v: Vec<(String, Vec<u8>)>| {
        v.into_iter()
            .filter(|(n, _)| n != "scenes.json")
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(read_all(&a)), strip(read_all(&b)));
    assert_ne!(strip(read_all(&a)), strip(read_all(&c)));
}

#[test]
fn sweep_writes_svg_json_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let code = run(&[
        "sweep-cfg",
        "--scales",
        "1.0:2.0:0.2",
        "--text-scale",
        "7.5",
        "--trials",
        "50",
        "--steps",
        "20",
        "--out",
        out,
    ]);
    assert_eq!(code, 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("sweep.json")).unwrap())
            .unwrap();
    assert_eq!(report["points"].as_array().unwrap().len(), 6);
    assert_eq!(report["text_scale"], 7.5);
    assert!(report["preservation_rank"]["rho"].as_f64().unwrap() > 0.0);
    assert!(report["alignment_rank"]["rho"].as_f64().unwrap() < 0.0);
    assert!(std::fs::read_to_string(tmp.path().join("sweep.svg"))
        .unwrap()
        .contains("<polyline"));
    assert_eq!(
        std::fs::read_to_string(tmp.path().join("sweep.csv"))
            .unwrap()
            .lines()
            .count(),
        7
    );
    assert_eq!(
        run(&["sweep-cfg", "--scales", "1.0:1.2:0.2", "--out", out]),
        1
    );
}

#[test]
fn run_and_eval_over_generated_scenes() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes = tmp.path().join("scenes");
    assert_eq!(
        run(&[
            "gen-scenes",
            "--count",
            "2",
            "--out",
            scenes.to_str().unwrap()
        ]),
        0
    );
    let entries: Vec<serde_json::Value> = (0..2)
        .map(|i| {
            serde_json::json!({
                "input": format!("scenes/scene{i:03}.png"),
                "instruction": "make it brighter",
                "ground_truth": format!("scenes/scene{i:03}.png"),
                "global_description": "shapes on gray",
                "local_description": "a red shape",
                "mask": format!("scenes/scene{i:03}_mask.pgm"),
            })
        })
        .collect();
    let manifest = tmp.path().join("manifest.json");
    std::fs::write(&manifest, serde_json::to_string(&entries).unwrap()).unwrap();
    let out = tmp.path().join("eval");
    let code = run(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--steps",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let rows = metrics["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let m = &r["metrics"];
        let mean = (m["clip_i"].as_f64().unwrap()
            + m["dino_i"].as_f64().unwrap()
            + m["clip_t_global"].as_f64().unwrap()
            + m["clip_t_local"].as_f64().unwrap())
            / 4.0;
        assert!((mean - m["total"].as_f64().unwrap()).abs() < 1e-12);
        // The reconstruction editor leaves the image nearly unchanged.
        assert!(m["clip_i"].as_f64().unwrap() > 0.99);
    }
    assert_eq!(
        std::fs::read_to_string(out.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    std::fs::remove_file(scenes.join("scene001_mask.pgm")).unwrap();
    assert_eq!(
        run(&[
            "eval",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        1
    );
}

#[test]
fn train_reasoner_rejects_too_few_scenes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        run(&[
            "train-reasoner",
            "--scenes",
            "4",
            "--epochs",
            "1",
            "--out",
            tmp.path().to_str().unwrap()
        ]),
        1
    );
}
