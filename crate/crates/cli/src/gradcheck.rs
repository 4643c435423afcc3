use std::process::ExitCode;

use anyhow::anyhow;
use cropforge::autograd::gradcheck::{run_suite, SuiteOptions, Tolerance, DIFFERENTIABLE_OPS};
use cropforge::training::composition_gradcheck;

use crate::user;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, env = "CROPFORGE_SEED", default_value_t = 0)]
    seed: u64,
    /// Random cases per op, and seeds for the decoder+loss composition.
    #[arg(long, default_value_t = 20)]
    cases: usize,
    /// Corrupt one op's backward rule to confirm the suite catches it.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

pub fn run(args: Args) -> anyhow::Result<ExitCode> {
    let fault = match &args.inject_fault {
        Some(name) => Some(
            DIFFERENTIABLE_OPS
                .iter()
                .copied()
                .find(|op| op.name() == name)
                .ok_or_else(|| user(anyhow!("unknown op '{name}'")))?,
        ),
        None => None,
    };
    let opts = SuiteOptions {
        seed: args.seed,
        cases_per_op: args.cases,
        inject_fault: fault,
        tolerance: Tolerance::default(),
    };
    let reports = run_suite(&opts)?;
    let mut ok = true;
    println!("{:<14} {:>6} {:>12}  result", "op", "cases", "worst rel");
    for r in &reports {
        ok &= r.passed;
        println!("{:<14} {:>6} {:>12.3e}  {}", r.op, r.cases, r.worst_rel_error, verdict(r.passed));
    }
    let mut worst: f64 = 0.0;
    for i in 0..args.cases as u64 {
        let out = composition_gradcheck(args.seed.wrapping_add(i), &opts.tolerance)?;
        worst = worst.max(out.worst_rel_error);
    }
    let comp_ok = worst <= opts.tolerance.rel;
    ok &= comp_ok;
    println!("{:<14} {:>6} {:>12.3e}  {}", "decoder+loss", args.cases, worst, verdict(comp_ok));
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "ok"
    } else {
        "FAIL"
    }
}
