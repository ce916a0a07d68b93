#pragma once

#include <functional>
#include <memory>
#include <string_view>
#include <vector>

#include "petlab/errors.hpp"
#include "petlab/tensor.hpp"

namespace petlab {

// Tape of primitive operations in execution order. Construction order is
// a topological order by definition: every node's inputs exist before
// the node runs. One backward pass walks the tape once, in reverse.
template <typename T>
class Graph {
public:
    struct Node {
        std::string_view op;
        std::vector<std::shared_ptr<TensorData<T>>> inputs;
        std::shared_ptr<TensorData<T>> output;
        // Reads output->grad, accumulates into the inputs that require grad.
        std::function<void()> backward;
    };

    void record(Node node) { nodes_.push_back(std::move(node)); }

    std::size_t node_count() const { return nodes_.size(); }
    const std::vector<Node>& nodes() const { return nodes_; }
    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and propagates through the tape in
    // reverse. Gradients accumulate additively, so a tensor consumed by
    // several ops receives the sum over all paths. Nodes whose output
    // never received a gradient are not on a path from the loss; they
    // are visited and skipped.
    void run_backward(const Tensor<T>& loss) {
        if (loss.size() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " +
                                shape_str(loss.shape()));
        }
        loss.storage()->accumulate_grad(std::vector<T>{T{1}});
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->output->grad.empty()) continue;
            if (it->backward) it->backward();
        }
    }

    // True when `descendant`'s value depends on `ancestor` through
    // recorded ops. Used by structural tests (e.g. "no edge from the
    // image to the static prompts").
    bool depends_on(const std::shared_ptr<TensorData<T>>& descendant,
                    const std::shared_ptr<TensorData<T>>& ancestor) const {
        if (descendant == ancestor) return true;
        std::vector<const TensorData<T>*> frontier{descendant.get()};
        std::vector<const TensorData<T>*> seen;
        while (!frontier.empty()) {
            const TensorData<T>* cur = frontier.back();
            frontier.pop_back();
            for (const auto& node : nodes_) {
                if (node.output.get() != cur) continue;
                for (const auto& in : node.inputs) {
                    if (in == ancestor) return true;
                    const TensorData<T>* p = in.get();
                    bool visited = false;
                    for (const auto* s : seen) {
                        if (s == p) {
                            visited = true;
                            break;
                        }
                    }
                    if (!visited) {
                        seen.push_back(p);
                        frontier.push_back(p);
                    }
                }
            }
        }
        return false;
    }

private:
    std::vector<Node> nodes_;
};

namespace detail {
template <typename T>
inline thread_local Graph<T>* active_graph_tls = nullptr;
}

template <typename T>
Graph<T>* active_graph() {
    return detail::active_graph_tls<T>;
}

// RAII scope that owns a graph and makes it the recording target for the
// current thread. Graph construction and backward are single-threaded
// per run; concurrent runs each own their scope on their own thread.
template <typename T>
class GraphScope {
public:
    GraphScope() : previous_(detail::active_graph_tls<T>) {
        detail::active_graph_tls<T> = &graph_;
    }
    ~GraphScope() { detail::active_graph_tls<T> = previous_; }

    GraphScope(const GraphScope&) = delete;
    GraphScope& operator=(const GraphScope&) = delete;

    Graph<T>& graph() { return graph_; }

    void backward(const Tensor<T>& loss) { graph_.run_backward(loss); }

private:
    Graph<T> graph_;
    Graph<T>* previous_;
};

// Free-function form of the backward operation; requires an active scope.
template <typename T>
void backward(const Tensor<T>& loss) {
    Graph<T>* g = active_graph<T>();
    if (!g) throw ContractError("backward called with no active graph");
    g->run_backward(loss);
}

}  // namespace petlab
