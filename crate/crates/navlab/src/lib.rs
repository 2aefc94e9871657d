//! A self-contained 2D robot-navigation laboratory: a PPO teacher trained on
//! clean observations with a contrastive auxiliary objective, and a
//! supervised student that fuses noisy egocentric-map and laser features to
//! imitate the teacher's representation and policy.

pub mod config;
pub mod gridworld;
pub mod policy;
pub mod navenv;
pub mod student;
pub mod teacher;
pub mod tensornet;
