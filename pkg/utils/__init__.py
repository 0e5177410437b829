# Marks the 'utils' directory as a Python package.
