//! Reads the bundled checkpoint, prints its stored config and tensor
//! inventory, and checks that a byte round trip is lossless.

use ras_core::checkpoint;

const MODEL: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/toy_model.rasf");

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let ck = checkpoint::load(MODEL)?;
    println!("{}", ck.config_text.trim_end());
    println!("{} parameters", ck.model.num_parameters());
    for (name, t) in ck.model.tensors().iter().take(6) {
        println!("  {name:<20} {:?}", t.shape());
    }
    let bytes = checkpoint::to_bytes(&ck.model, &ck.config)?;
    let back = checkpoint::from_bytes(&bytes)?;
    assert_eq!(back.model, ck.model);
    println!("round trip of {} bytes is exact", bytes.len());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
