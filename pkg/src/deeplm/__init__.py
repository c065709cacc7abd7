"""Two-step dynamic prediction of ICU-acquired infection.

A 1-D convolutional network condenses 24-hour vital-sign windows into a risk
score that enters a landmark competing-risks Cox super-model; SMOE-scale
saliency explains what the network looks at.
"""

__version__ = "0.1.0"
