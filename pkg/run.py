#!/usr/bin/env python3
"""
rdm-ood - Entry Point
Run with: python run.py <command> [options]
"""

from app import main

if __name__ == '__main__':
    main()
