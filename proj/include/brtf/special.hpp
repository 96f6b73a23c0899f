#pragma once

namespace brtf {

double digamma(double x);
double trigamma(double x);
double log_gamma(double x);

/// Differential entropy of Ga(shape, rate).
double gamma_entropy(double shape, double rate);

/// a*ln(b) - lnGamma(a), the log-normalizer of Ga(a, b). Returns 0 when either
/// parameter is zero (improper limit; contributes only a constant).
double gamma_log_normalizer(double shape, double rate);

}  // namespace brtf
