// Closed-form parameter counts for the reference encoder shapes.

use distillforge::model::{count_parameters, EncoderConfig};

pub fn run_example() -> Vec<(&'static str, usize)> {
    vec![
        ("robbert-base", count_parameters(&EncoderConfig::robbert_base(40_000))),
        ("distilbert", count_parameters(&EncoderConfig::distilbert(40_000))),
        ("bort", count_parameters(&EncoderConfig::bort(40_000))),
    ]
}

fn main() {
    for (name, n) in run_example() {
        println!("{name:<14} {:>7.2}M", n as f64 / 1e6);
    }
}
