//! Writes a handful of scenes with the default config to a directory.

use detgen::scenegen::{generate_scene, DatasetConfig};

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "samples".into());
    std::fs::create_dir_all(&out).unwrap();
    let cfg = DatasetConfig::default();
    for i in 0..8 {
        let s = generate_scene(&cfg, i).unwrap();
        s.image
            .write_ppm(&std::path::Path::new(&out).join(format!("{i}.ppm")))
            .unwrap();
        println!("{}", serde_json::to_string(&s.record).unwrap());
    }
}
