# Marks the 'modules' directory as a Python package holding the
# simulation, quantization, solving and policy modules.
