//! Finite-difference checks of every primitive and of the composed objectives.

use anet::verify::{composed_suite, primitive_checks};

fn main() -> anyhow::Result<()> {
    let mut failed = 0;
    for r in primitive_checks(0)?.iter().chain(&composed_suite(0)?) {
        println!("{r}");
        failed += usize::from(!r.passed);
    }
    anyhow::ensure!(failed == 0, "{failed} checks failed");
    Ok(())
}
