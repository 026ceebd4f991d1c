#!/usr/bin/env python3
"""
Instance Painter
Main entry point: `python run.py <command>`; `python run.py serve` starts the HTTP service
"""
from app.cli import cli

if __name__ == "__main__":
    cli()
