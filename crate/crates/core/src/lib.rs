pub mod animation;
pub mod fixtures;
pub mod kinematics;
pub mod llm;
pub mod planner;
pub mod robot_link;
pub mod scene;
pub mod session;
