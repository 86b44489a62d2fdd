"""
Simple script to run the oscillator engine CLI.
Alternative to using ``python -m oscgnn.main`` directly.
"""
import sys

from oscgnn.main import main

if __name__ == "__main__":
    sys.exit(main())
