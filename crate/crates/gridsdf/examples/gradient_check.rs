//! Runs the full randomized finite-difference verification suite: every
//! tape operation, every parameter-group path through the field, the
//! rendering networks, and the second-order spatial-gradient path. Prints
//! one row per check and exits nonzero if any row fails.

fn main() {
    let t0 = std::time::Instant::now();
    let rows = gridsdf::gradcheck::run_full_suite(100, 20260816);
    print!("{}", gridsdf::gradcheck::format_table(&rows));

    let failed = rows.iter().filter(|r| !r.passed).count();
    println!(
        "{} checks, {} failed, {:.1} ms",
        rows.len(),
        failed,
        t0.elapsed().as_secs_f64() * 1e3
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
