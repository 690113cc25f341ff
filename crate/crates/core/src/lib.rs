//! Intrinsic randomness of sequential quantum measurements.
//!
//! * [`qcore`]: validated states, POVMs and dense linear-algebra helpers.
//! * [`cglmp`]: CGLMP bases, canonical qutrit states and the I_d functional.
//! * [`seqsim`]: weak measurements, instruments and one-Alice/n-Bob chains.
//! * [`guessing`]: classical and quantum guessing probabilities, Naimark dilation.
//! * [`npa`]: sequential NPA moment-matrix relaxation of Eve's guessing probability.
//! * [`sdp`]: primal-dual interior-point SDP solver and SDPA-sparse interchange.
//! * [`cli`]: command-line harness emitting CSV tables.

pub mod cglmp;
pub mod cli;
pub mod guessing;
pub mod npa;
pub mod qcore;
pub mod sdp;
pub mod seqsim;

pub use cglmp::{CglmpSettings, JointDistribution, Party, StateKind};

pub use guessing::{GuessReport, GuessScope};
pub use qcore::{DensityOperator, Povm, StateVector, Tolerances};
pub use sdp::{SdpProblem, SdpSolution, SolverConfig, SolverStatus};

pub use seqsim::{Instrument, InstrumentMode, PvmMixture, SequentialScenario};
