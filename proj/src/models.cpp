#include "sonostack/models.hpp"

#include <sstream>

#include "sonostack/errors.hpp"

namespace sonostack::models {

const char* architecture_name(Architecture arch) {
    switch (arch) {
        case Architecture::CNN1: return "cnn1";
        case Architecture::CNN2: return "cnn2";
        case Architecture::AST: return "ast";
    }
    return "?";
}

Architecture architecture_from_name(const std::string& name) {
    if (name == "cnn1") return Architecture::CNN1;
    if (name == "cnn2") return Architecture::CNN2;
    if (name == "ast") return Architecture::AST;
    throw ConfigError("unknown architecture " + name);
}

void ModelSpec::validate() const {
    if (n_classes < 2) throw ConfigError("ModelSpec: n_classes must be >= 2");
    if (in_channels < 1) throw ConfigError("ModelSpec: in_channels must be >= 1");
    if (arch == Architecture::AST) {
        if (ast.depth < 1 || ast.heads < 1 || ast.embed_dim < 4 || ast.ffn_dim < 1 ||
            ast.patch < 1) {
            throw ConfigError("ModelSpec: invalid AST dimensions");
        }
        if (ast.embed_dim % ast.heads != 0) {
            throw ConfigError("ModelSpec: AST embed_dim must be divisible by heads");
        }
        if (ast.embed_dim % 4 != 0) {
            throw ConfigError("ModelSpec: AST embed_dim must be a multiple of 4");
        }
        if (!(ast.dropout >= 0.0 && ast.dropout < 1.0)) {
            throw ConfigError("ModelSpec: AST dropout out of range");
        }
    }
}

std::string ModelSpec::to_text() const {
    std::ostringstream out;
    out << "arch=" << architecture_name(arch) << '\n';
    out << "in_channels=" << in_channels << '\n';
    out << "n_classes=" << n_classes << '\n';
    out << "ast_depth=" << ast.depth << '\n';
    out << "ast_heads=" << ast.heads << '\n';
    out << "ast_embed=" << ast.embed_dim << '\n';
    out << "ast_ffn=" << ast.ffn_dim << '\n';
    out << "ast_patch=" << ast.patch << '\n';
    out << "ast_dropout=" << ast.dropout << '\n';
    return out.str();
}

ModelSpec ModelSpec::from_text(const std::string& text) {
    ModelSpec spec;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        try {
            if (key == "arch") {
                spec.arch = architecture_from_name(value);
            } else if (key == "in_channels") {
                spec.in_channels = std::stoi(value);
            } else if (key == "n_classes") {
                spec.n_classes = std::stoi(value);
            } else if (key == "ast_depth") {
                spec.ast.depth = std::stoi(value);
            } else if (key == "ast_heads") {
                spec.ast.heads = std::stoi(value);
            } else if (key == "ast_embed") {
                spec.ast.embed_dim = std::stoi(value);
            } else if (key == "ast_ffn") {
                spec.ast.ffn_dim = std::stoi(value);
            } else if (key == "ast_patch") {
                spec.ast.patch = std::stoi(value);
            } else if (key == "ast_dropout") {
                spec.ast.dropout = std::stod(value);
            } else {
                throw CheckpointError("ModelSpec: unknown key " + key);
            }
        } catch (const std::invalid_argument&) {
            throw CheckpointError("ModelSpec: bad value for " + key);
        } catch (const ConfigError& e) {
            throw CheckpointError(e.what());
        }
    }
    return spec;
}

} // namespace sonostack::models
