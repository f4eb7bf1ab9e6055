from .cli import main

main(prog_name="anomaly_scanner")
