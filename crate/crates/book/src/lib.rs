//! The mdbook guide under `book/`, included chapter by chapter so that
//! `cargo test` runs every listing.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(pyramid, "pyramid.md");
chapter!(foreground, "foreground.md");
chapter!(tokens, "tokens.md");
chapter!(attention, "attention.md");
chapter!(training, "training.md");
chapter!(inference, "inference.md");
chapter!(metrics, "metrics.md");
chapter!(cli, "cli.md");
