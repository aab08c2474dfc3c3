//! Tiles and image tokens per image size for every preset model.
//!
//! ```text
//! cargo run --example image_tokens
//! ```

use lmmsim::model::presets;

fn main() {
    let sizes = [(336, 336), (560, 560), (896, 896), (1024, 768), (1920, 1080), (4032, 3024)];
    print!("{:<14}", "model");
    for (w, h) in sizes {
        print!("{:>14}", format!("{w}x{h}"));
    }
    println!();
    for m in presets() {
        print!("{:<14}", m.name);
        for (w, h) in sizes {
            let img = m.image(w, h);
            print!("{:>14}", format!("{}t/{}", img.tiles, img.image_tokens));
        }
        println!();
    }
    println!("\ncells are tiles/image tokens");
}
