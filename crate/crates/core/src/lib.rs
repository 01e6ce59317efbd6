pub mod clock;
pub mod daq;
pub mod eventbus;
pub mod rtcontrol;
pub mod sequencer;
pub mod shottree;
pub mod scope;
