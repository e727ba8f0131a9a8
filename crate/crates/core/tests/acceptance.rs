//! Runs every acceptance check and prints one line per check.

fn main() {
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for &(id, _, _) in mcot::verify::CHECKS.iter() {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let r = mcot::verify::run_check(id).expect("listed check");
        println!("{}", r.line());
        if !r.passed {
            failed += 1;
        }
    }
    println!("acceptance: {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
