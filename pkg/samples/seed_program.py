"""Message-passing candidate evolved by the search engine."""

HIDDEN_DIM = 128

# <SPARK:OPERATOR>
def make_operator(dim):
    proj = [[1.0 if i == j else 0.0 for j in range(dim)] for i in range(dim)]
    gain = [1.0] * dim
    return proj, gain
# </SPARK:OPERATOR>


def build_model(dim=HIDDEN_DIM):
    proj, gate = make_operator(dim)
    return proj, gate


# <SPARK:ACTION>
def forward(state, adj, proj, gate):
    out = matmul(state, proj)
    out = out * gate
    return out
# </SPARK:ACTION>


def evaluate_contract(state, adj):
    proj, gate = build_model()
    return forward(state, adj, proj, gate)
