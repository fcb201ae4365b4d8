"""
CoulombGasLab
Entry point for the command line with environment loading.
"""

import sys

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Import and run the application
from app.main import main

if __name__ == "__main__":
    sys.exit(main())
