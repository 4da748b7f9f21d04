# Adversarial robustness benchmark package
