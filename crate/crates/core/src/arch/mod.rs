//! Residual block and network construction.

mod net;
mod spec;

pub use net::{
    apply_se, build_network, BatchStat, Buffer, BuiltNetwork, Forward, Mode, Param, ParamTag, SeLayer, BN_MOMENTUM,
    NORM_EPS,
};
pub use spec::*;
