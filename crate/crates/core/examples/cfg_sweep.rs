//! Image-guidance sweep in the Gaussian world.
//!
//! cargo run --release --example cfg_sweep -- [trials] [out_dir]

use mcot::eval::{sweep_cfg, Embedders, SweepScenario, SweepSettings};

fn main() -> mcot::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let trials = args.first().and_then(|s| s.parse().ok()).unwrap_or(100);
    let settings = SweepSettings {
        trials,
        ..SweepSettings::default()
    };
    let start = std::time::Instant::now();
    let report = sweep_cfg(
        &SweepScenario::textured(0)?,
        &settings,
        &Embedders::default(),
    )?;
    print!("{}", report.to_csv());
    println!(
        "preservation rho {:+.3}, alignment rho {:+.3} ({:.1}s)",
        report.preservation_rank.rho,
        report.alignment_rank.rho,
        start.elapsed().as_secs_f64()
    );
    if let Some(dir) = args.get(1) {
        std::fs::create_dir_all(dir).map_err(|e| mcot::Error::Io {
            path: dir.into(),
            source: e,
        })?;
        std::fs::write(format!("{dir}/sweep.svg"), report.to_svg()).map_err(|e| {
            mcot::Error::Io {
                path: dir.into(),
                source: e,
            }
        })?;
    }
    Ok(())
}
