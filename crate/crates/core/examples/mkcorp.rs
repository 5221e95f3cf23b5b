use stainlab::corpus::{build_corpus, CorpusConfig};
fn main() {
    let mut c = CorpusConfig::desk(42);
    c.slides_per_class = 20;
    let s = build_corpus(&c, std::path::Path::new("/tmp/gauge_20/corpus")).unwrap();
    println!("corpus {} patches", s.patches);
}
