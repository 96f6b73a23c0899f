#include "brtf/special.hpp"

#include <cmath>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

namespace brtf {

double digamma(double x) { return boost::math::digamma(x); }
double trigamma(double x) { return boost::math::trigamma(x); }
double log_gamma(double x) { return boost::math::lgamma(x); }

double gamma_entropy(double shape, double rate) {
  return shape - std::log(rate) + log_gamma(shape) + (1.0 - shape) * digamma(shape);
}

double gamma_log_normalizer(double shape, double rate) {
  if (shape == 0.0 || rate == 0.0) return 0.0;
  return shape * std::log(rate) - log_gamma(shape);
}

}  // namespace brtf
