"""Factor-graph GNSS localisation with zero-velocity and INS/odometry constraints."""
