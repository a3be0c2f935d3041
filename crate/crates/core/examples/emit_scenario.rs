//! Prints the built-in example scenario as pretty JSON. The shipped files
//! under `scenarios/` are this output with fields adjusted per mode;
//! regenerate with `cargo run -p qst-field --example emit_scenario`.

fn main() {
    let config = qst_field::scenario::ScenarioConfig::example();
    println!("{}", serde_json::to_string_pretty(&config).unwrap());
}
