"""
Outer surface of the beacon emulation engine: input validators and the command-line front end
"""
