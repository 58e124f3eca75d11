pub mod bits;
pub mod ids;
pub mod keyrelay;
pub mod keystore;
pub mod netgraph;
pub mod physlink;
pub mod qkdproto;
pub mod rng;
pub mod scenario;
pub mod switchfab;
pub mod time;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/links.md")]
    mod links {}
    #[doc = include_str!("../../../book/src/postprocessing.md")]
    mod postprocessing {}
    #[doc = include_str!("../../../book/src/topology.md")]
    mod topology {}
    #[doc = include_str!("../../../book/src/switching.md")]
    mod switching {}
    #[doc = include_str!("../../../book/src/relay.md")]
    mod relay {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
}
