"""
Core modules of the event-grounding toolkit.
"""
