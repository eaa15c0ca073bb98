#ifndef FIMLORA_EXACT_SUM_HPP
#define FIMLORA_EXACT_SUM_HPP

#include <bit>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace fimlora {

namespace detail {
__extension__ typedef unsigned __int128 u128;
}  // namespace detail

/// Exact accumulator for non-negative doubles.
///
/// The running total is held as a base-2^32 fixed-point integer over a window
/// of digits that grows on demand, so additions are exact and the total does
/// not depend on the order in which terms (or partial sums) were folded in.
/// value() rounds the exact total to the nearest double.
class ExactSum {
    using u128 = detail::u128;

public:
    void add(double x) {
        if (!(x >= 0.0) || !std::isfinite(x)) {
            throw std::invalid_argument("ExactSum: terms must be finite and non-negative");
        }
        if (x == 0.0) {
            return;
        }
        int exp = 0;
        const double frac = std::frexp(x, &exp);  // x = frac * 2^exp, frac in [0.5, 1)
        const auto mant = static_cast<std::uint64_t>(std::ldexp(frac, 53));
        const int e = exp - 53;  // x = mant * 2^e exactly
        const int digit = floor_div(e, 32);
        const int shift = e - 32 * digit;
        const u128 wide = static_cast<u128>(mant) << shift;  // < 2^85
        add_digits(digit, {static_cast<std::uint32_t>(wide), static_cast<std::uint32_t>(wide >> 32),
                           static_cast<std::uint32_t>(wide >> 64)});
    }

    void add(const ExactSum& other) {
        if (other.digits_.empty()) {
            return;
        }
        if (&other == this) {
            const std::vector<std::uint32_t> copy = digits_;
            add_digits(base_, copy);
            return;
        }
        add_digits(other.base_, other.digits_);
    }

    [[nodiscard]] bool is_zero() const noexcept { return digits_.empty(); }

    /// Exact total rounded to nearest (ties to even) in the normal range.
    [[nodiscard]] double value() const {
        if (digits_.empty()) {
            return 0.0;
        }
        const int top = static_cast<int>(digits_.size()) - 1;
        u128 window = 0;
        for (int k = 0; k < 3; ++k) {
            window <<= 32;
            const int i = top - k;
            if (i >= 0) {
                window |= digits_[static_cast<std::size_t>(i)];
            }
        }
        // window holds digits top..top-2; its value is window * 2^(32*(base+top-2)).
        bool sticky = false;
        for (int i = top - 3; i >= 0; --i) {
            sticky = sticky || digits_[static_cast<std::size_t>(i)] != 0;
        }
        const int lead = 127 - leading_zeros(window);  // bit index of the leading one
        const int drop = lead - 63;                    // keep the top 64 bits
        std::uint64_t head;
        if (drop > 0) {
            const u128 mask = (static_cast<u128>(1) << drop) - 1;
            sticky = sticky || (window & mask) != 0;
            head = static_cast<std::uint64_t>(window >> drop);
        } else {
            head = static_cast<std::uint64_t>(window << (-drop));
        }
        if (sticky) {
            head |= 1U;  // below the 53-bit rounding point; breaks ties correctly
        }
        const int scale = 32 * (base_ + top - 2) + drop;
        return std::ldexp(static_cast<double>(head), scale);
    }

    friend bool operator==(const ExactSum&, const ExactSum&) = default;

private:
    static int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

    static int leading_zeros(u128 v) {
        const auto hi = static_cast<std::uint64_t>(v >> 64);
        if (hi != 0) {
            return std::countl_zero(hi);
        }
        return 64 + std::countl_zero(static_cast<std::uint64_t>(v));
    }

    void add_digits(int first, const std::vector<std::uint32_t>& addend) {
        const int last = first + static_cast<int>(addend.size());  // exclusive
        if (digits_.empty()) {
            base_ = first;
        }
        if (first < base_) {
            digits_.insert(digits_.begin(), static_cast<std::size_t>(base_ - first), 0U);
            base_ = first;
        }
        if (last + 1 > base_ + static_cast<int>(digits_.size())) {
            digits_.resize(static_cast<std::size_t>(last + 1 - base_), 0U);
        }
        std::uint64_t carry = 0;
        std::size_t i = static_cast<std::size_t>(first - base_);
        for (std::uint32_t d : addend) {
            const std::uint64_t s = static_cast<std::uint64_t>(digits_[i]) + d + carry;
            digits_[i] = static_cast<std::uint32_t>(s);
            carry = s >> 32;
            ++i;
        }
        while (carry != 0) {
            if (i == digits_.size()) {
                digits_.push_back(0U);
            }
            const std::uint64_t s = static_cast<std::uint64_t>(digits_[i]) + carry;
            digits_[i] = static_cast<std::uint32_t>(s);
            carry = s >> 32;
            ++i;
        }
        normalize();
    }

    // Canonical form: no zero digits at either end, so equal totals compare equal.
    void normalize() {
        while (!digits_.empty() && digits_.back() == 0U) {
            digits_.pop_back();
        }
        std::size_t lead = 0;
        while (lead < digits_.size() && digits_[lead] == 0U) {
            ++lead;
        }
        if (lead == digits_.size()) {
            digits_.clear();
            base_ = 0;
            return;
        }
        if (lead > 0) {
            digits_.erase(digits_.begin(), digits_.begin() + static_cast<std::ptrdiff_t>(lead));
            base_ += static_cast<int>(lead);
        }
    }

    int base_ = 0;  // value = sum_i digits_[i] * 2^(32 * (base_ + i))
    std::vector<std::uint32_t> digits_;
};

}  // namespace fimlora

#endif  // FIMLORA_EXACT_SUM_HPP
