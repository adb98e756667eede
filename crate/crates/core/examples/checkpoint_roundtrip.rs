// Save and reload a checkpoint, and build a half-depth student that copies
// every other teacher layer.

use distillforge::model::{init_student_from_teacher, load_checkpoint, save_checkpoint, student_layer_map, EncoderConfig, EncoderModel};

pub struct CheckpointSummary {
    pub bytes: u64,
    pub identical: bool,
    pub layer_map: Vec<usize>,
    pub student_params: usize,
}

pub fn run_example() -> Result<CheckpointSummary, Box<dyn std::error::Error>> {
    let teacher = EncoderModel::init_random(EncoderConfig::new(12, 2, 16, 32, 64, 16), 0)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("teacher.ckpt");
    save_checkpoint(&teacher, &path)?;
    let reloaded = load_checkpoint(&path)?;

    let student = init_student_from_teacher(&reloaded, EncoderConfig { layers: 6, ..*teacher.config() }, 1)?;
    Ok(CheckpointSummary {
        bytes: std::fs::metadata(&path)?.len(),
        identical: reloaded.params == teacher.params,
        layer_map: student_layer_map(12, 6),
        student_params: student.num_parameters(),
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = run_example()?;
    println!("checkpoint {} bytes, reload identical {}", s.bytes, s.identical);
    println!("student layers from teacher {:?}, {} parameters", s.layer_map, s.student_params);
    Ok(())
}
