from lidar_probe_init.cli import run

run()
