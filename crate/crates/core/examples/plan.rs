//! Build a planner prompt, ask a mock planner, and print the parsed plan.
//!
//! cargo run --example plan -- "make it dramatic" [script]

use mcot::backends::PlannerClient;
use mcot::plan::{build_planner_prompt, serialize_plan, Instruction, PlannerPromptConfig};

fn main() -> mcot::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let text = args
        .first()
        .map(String::as_str)
        .unwrap_or("make it dramatic");
    let script = args.get(1).map(String::as_str).unwrap_or("demo");

    let instr = Instruction::new(text, "a calm sea under a clear sky")?;
    let prompt = build_planner_prompt(&instr, &PlannerPromptConfig::with_max_steps(3))?;
    println!("--- planner prompt ---\n{prompt}\n");

    let plan = PlannerClient::mock(script)?.request_plan(&prompt, 3)?;
    for sp in plan.sub_prompts() {
        println!("step {}: {}", sp.id, sp.text);
    }
    println!("\n{}", serialize_plan(&plan));
    Ok(())
}
