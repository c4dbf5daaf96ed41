# Trajectory Risk Engine
