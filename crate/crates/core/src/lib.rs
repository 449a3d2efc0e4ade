//! Simulated reactive grasping: template tracking fused with Generalized-ICP
//! for 6-DoF object tracking, a grasp-configuration observer built on
//! multi-term inverse kinematics, and a backstepping trajectory follower.

pub mod geometry;
pub mod kdtree;
pub mod kinematics;
pub mod observer;
pub mod planner;
pub mod registration;
pub mod sim;
pub mod thor;
pub mod tracking;
