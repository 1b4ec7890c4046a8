"""visitlift: measure the visit lift of location-based ad campaigns.

Pipeline: impressions -> hits -> visits -> response series -> lift, with
propensity matching to remove targeting bias and statistical diagnostics
to score the result.
"""

__version__ = "0.1.0"
