//! Runs the finite-difference suite and prints the worst error per check.

use ldca::gradcheck::full_suite;

fn main() -> ldca::Result<()> {
    let suite = full_suite(11)?;
    for c in &suite.checks {
        let mark = if c.report.passed { "ok" } else { "FAIL" };
        println!("{mark:4} {:40} {:.2e}", c.name, c.report.max_rel_error);
    }
    println!("all passed: {}", suite.all_passed());
    Ok(())
}
