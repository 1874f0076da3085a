//! Regenerate the bundled synthetic corpus:
//! `cargo run -p whittle-core --example gen_corpus -- assets/corpus.txt 150000 2026`

use whittle_core::data::synthetic_text;

fn main() {
    let mut args = std::env::args().skip(1);
    let path = args.next().expect("usage: gen_corpus <path> <bytes> <seed>");
    let bytes: usize = args.next().expect("missing byte count").parse().expect("bad byte count");
    let seed: u64 = args.next().expect("missing seed").parse().expect("bad seed");
    std::fs::write(&path, synthetic_text(bytes, seed)).expect("write corpus");
    println!("wrote {path}");
}
