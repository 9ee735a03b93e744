pub mod backtest;
pub mod evidence;
pub mod execution;
pub mod indicators;
pub mod market_data;
pub mod memory;
pub mod model_gateway;
pub mod reflection;
pub mod regime;
pub mod risk;
pub mod shock_guard;
pub mod strategist;
pub mod synth;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/market-data.md")]
    mod market_data {}
    #[doc = include_str!("../../../book/src/decisions.md")]
    mod decisions {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/reflection.md")]
    mod reflection {}
    #[doc = include_str!("../../../book/src/risk.md")]
    mod risk {}
    #[doc = include_str!("../../../book/src/shock-guard.md")]
    mod shock_guard {}
    #[doc = include_str!("../../../book/src/policies.md")]
    mod policies {}
    #[doc = include_str!("../../../book/src/backtest.md")]
    mod backtest {}
}
