#pragma once

#include <vector>

// Scalar reference implementations written with plain loops over
// std::vector. They share no code with the library.
namespace impinj::oracle {

using Vec = std::vector<double>;
using Rows = std::vector<Vec>;

Vec soften_teacher(const Vec& q, double t);
Vec softmax(const Vec& z, double t = 1.0);
double distill_loss(const Rows& logits, const Rows& q, const std::vector<int>& labels, double t, double alpha);
double kl(const Rows& mu, const Rows& logvar);
double reconstruction(const Rows& x_tilde, const Rows& x, const Rows& x_ref);
double sparsity(const Rows& x_tilde, const Rows& x);

struct Rates {
  double uer;
  double tsr;
  double cts;  // NaN when nobody evaded
};
// after[i] is the post-attack label, target[i] the intended class.
Rates evasion(const std::vector<int>& after, const std::vector<int>& target, int malware_class = 6);

double mean(const Vec& v);
double sample_std(const Vec& v);
double quantile(Vec v, double p);

double supcon(const Rows& h, const std::vector<int>& labels, double tau);
Rows arcface(const Rows& h, const Rows& centres, const std::vector<int>& labels, double s, double m);
double cross_entropy(const Rows& logits, const std::vector<int>& labels);
// Classes absent from `truth` are left out of the average.
double macro_f1(const std::vector<int>& pred, const std::vector<int>& truth, int classes);

}  // namespace impinj::oracle
