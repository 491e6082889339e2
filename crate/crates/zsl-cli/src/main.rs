fn main() { let _ = zsl_core::probe(7, 3); }
